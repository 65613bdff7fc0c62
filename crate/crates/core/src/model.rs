//! Two-stream transformer with a shared relative-position bias.
//!
//! Keys and values for both streams come from the content stream; each
//! stream supplies its own queries and attention mask. Output logits use the
//! token embedding matrix transposed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::masks::MaskPair;
use crate::permute::MpnetLayout;
use crate::tensor::{BoolMatrix, Tape, Tensor, TensorError, Var};
use crate::tokenizer::MASK;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds max_pos {max}")]
    Overlength { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("layout and masks disagree: {0}")]
    Inconsistent(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_pos: usize,
    /// Zero disables the relative bias.
    pub rel_buckets: usize,
    pub rel_max_dist: usize,
    pub dropout: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            hidden: 128,
            heads: 4,
            ffn: 512,
            vocab: 1024,
            max_pos: 128,
            rel_buckets: 32,
            rel_max_dist: 128,
            dropout: 0.1,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn == 0 {
            return bad("layers, hidden, heads and ffn must be positive");
        }
        if self.hidden % self.heads != 0 {
            return bad("hidden must be divisible by heads");
        }
        if self.vocab <= crate::tokenizer::NUM_SPECIAL {
            return bad("vocab must exceed the reserved tokens");
        }
        if self.max_pos == 0 {
            return bad("max_pos must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        let int = || value.parse::<usize>().map_err(|e| format!("{key}: {e}"));
        let real = || value.parse::<f64>().map_err(|e| format!("{key}: {e}"));
        match key {
            "layers" => self.layers = int()?,
            "hidden" => self.hidden = int()?,
            "heads" => self.heads = int()?,
            "ffn" => self.ffn = int()?,
            "vocab" => self.vocab = int()?,
            "max_pos" => self.max_pos = int()?,
            "rel_buckets" => self.rel_buckets = int()?,
            "rel_max_dist" => self.rel_max_dist = int()?,
            "dropout" => self.dropout = real()?,
            "init_std" => self.init_std = real()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("layers", self.layers.to_string()),
            ("hidden", self.hidden.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn", self.ffn.to_string()),
            ("vocab", self.vocab.to_string()),
            ("max_pos", self.max_pos.to_string()),
            ("rel_buckets", self.rel_buckets.to_string()),
            ("rel_max_dist", self.rel_max_dist.to_string()),
            ("dropout", self.dropout.to_string()),
            ("init_std", self.init_std.to_string()),
        ]
    }
}

/// Symmetric log bucketing of a signed offset `query - key`.
///
/// Non-negative offsets use buckets `0..half`, negative ones `half..2*half`.
/// Within a half, offsets below `half/2` get exact buckets and the rest are
/// spread logarithmically up to `max_dist`, clamping beyond it.
pub fn relative_bucket(delta: i64, buckets: usize, max_dist: usize) -> usize {
    if buckets <= 1 {
        return 0;
    }
    let half = buckets / 2;
    let base = if delta < 0 { half } else { 0 };
    let n = delta.unsigned_abs() as usize;
    let exact = (half / 2).max(1);
    if n < exact {
        return base + n.min(half - 1);
    }
    if max_dist <= exact || half <= exact {
        return base + half - 1;
    }
    let span = (half - exact) as f64;
    let scaled = (n as f64 / exact as f64).ln() / (max_dist as f64 / exact as f64).ln() * span;
    let large = exact + (scaled + 1e-9).floor() as usize;
    base + large.min(half - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Tied with the output projection.
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub emb_ln_g: Tensor,
    pub emb_ln_b: Tensor,
    /// Learned query-stream input, added to the position embedding.
    pub query_vector: Tensor,
    /// Shared across layers, `rel_buckets x heads`.
    pub rel_bias: Tensor,
    pub layers: Vec<LayerParams>,
}

impl LayerParams {
    fn fields(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_g,
            &mut self.ln2_b,
        ]
    }
}

impl ModelParams {
    /// Every tensor zero, including layer-norm scales.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (h, f) = (config.hidden, config.ffn);
        let layer = || LayerParams {
            wq: Tensor::zeros(&[h, h]),
            bq: Tensor::zeros(&[h]),
            wk: Tensor::zeros(&[h, h]),
            bk: Tensor::zeros(&[h]),
            wv: Tensor::zeros(&[h, h]),
            bv: Tensor::zeros(&[h]),
            wo: Tensor::zeros(&[h, h]),
            bo: Tensor::zeros(&[h]),
            ln1_g: Tensor::zeros(&[h]),
            ln1_b: Tensor::zeros(&[h]),
            w1: Tensor::zeros(&[h, f]),
            b1: Tensor::zeros(&[f]),
            w2: Tensor::zeros(&[f, h]),
            b2: Tensor::zeros(&[h]),
            ln2_g: Tensor::zeros(&[h]),
            ln2_b: Tensor::zeros(&[h]),
        };
        Ok(ModelParams {
            config: config.clone(),
            tok_emb: Tensor::zeros(&[config.vocab, h]),
            pos_emb: Tensor::zeros(&[config.max_pos, h]),
            emb_ln_g: Tensor::zeros(&[h]),
            emb_ln_b: Tensor::zeros(&[h]),
            query_vector: Tensor::zeros(&[1, h]),
            rel_bias: Tensor::zeros(&[config.rel_buckets.max(1), config.heads]),
            layers: (0..config.layers).map(|_| layer()).collect(),
        })
    }

    /// Normal(0, init_std) weights, zero shifts and biases, unit scales.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = ModelParams::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std)
            .map_err(|e| ModelError::Config(format!("init_std: {e}")))?;
        for (name, t) in p.named_mut() {
            if is_scale(&name) {
                t.data_mut().fill(1.0);
            } else if !is_shift(&name) {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = normal.sample(&mut rng));
            }
        }
        Ok(p)
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
            ("emb_ln_g".to_string(), &self.emb_ln_g),
            ("emb_ln_b".to_string(), &self.emb_ln_b),
            ("query_vector".to_string(), &self.query_vector),
            ("rel_bias".to_string(), &self.rel_bias),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.fields() {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names: Vec<String> = self.named().into_iter().map(|(n, _)| n).collect();
        let mut tensors: Vec<&mut Tensor> = vec![
            &mut self.tok_emb,
            &mut self.pos_emb,
            &mut self.emb_ln_g,
            &mut self.emb_ln_b,
            &mut self.query_vector,
            &mut self.rel_bias,
        ];
        for layer in &mut self.layers {
            tensors.extend(layer.fields_mut());
        }
        names.into_iter().zip(tensors).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        let vars = self
            .named()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone().with_grad()))
            .collect();
        ParamVars { vars }
    }
}

fn is_scale(name: &str) -> bool {
    name.ends_with("_g")
}

fn is_shift(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    last.ends_with("_b") || (last.starts_with('b') && last.len() == 2)
}

/// Biases and layer-norm parameters are excluded from weight decay.
pub fn decays(name: &str) -> bool {
    !is_scale(name) && !is_shift(name)
}

/// Tape handles for the parameters, in [`ModelParams::named`] order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub vars: Vec<Var>,
}

const LAYER_FIELDS: usize = 16;
const GLOBAL_FIELDS: usize = 6;

struct LayerVars {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln1_g: Var,
    ln1_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    ln2_g: Var,
    ln2_b: Var,
}

impl ParamVars {
    pub fn tok_emb(&self) -> Var {
        self.vars[0]
    }
    fn pos_emb(&self) -> Var {
        self.vars[1]
    }
    fn emb_ln(&self) -> (Var, Var) {
        (self.vars[2], self.vars[3])
    }
    pub fn query_vector(&self) -> Var {
        self.vars[4]
    }
    fn rel_bias(&self) -> Var {
        self.vars[5]
    }
    fn layer(&self, i: usize) -> LayerVars {
        let v = &self.vars[GLOBAL_FIELDS + i * LAYER_FIELDS..];
        LayerVars {
            wq: v[0],
            bq: v[1],
            wk: v[2],
            bk: v[3],
            wv: v[4],
            bv: v[5],
            wo: v[6],
            bo: v[7],
            ln1_g: v[8],
            ln1_b: v[9],
            w1: v[10],
            b1: v[11],
            w2: v[12],
            b2: v[13],
            ln2_g: v[14],
            ln2_b: v[15],
        }
    }
}

/// How the query stream is seeded before the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QueryInit {
    /// Learned query vector plus position embedding.
    #[default]
    Learned,
    /// Mask-token embedding plus position embedding, which makes a query
    /// row computationally identical to a mask slot of the content stream.
    MaskToken,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Dropout rate and seed; `None` runs deterministically without dropout.
    pub dropout: Option<(f64, u64)>,
    pub query_init: QueryInit,
    /// Skips the last content layer when a query stream exists; nothing
    /// downstream of it feeds the query stream.
    pub query_only: bool,
}

/// One sequence fed to the packed forward.
#[derive(Debug, Clone, Copy)]
pub struct StreamItem<'a> {
    pub ids: &'a [usize],
    pub positions: &'a [usize],
    pub content_allow: &'a BoolMatrix,
    pub query_positions: &'a [usize],
    pub query_allow: &'a BoolMatrix,
}

impl<'a> StreamItem<'a> {
    pub fn new(layout: &'a MpnetLayout, masks: &'a MaskPair) -> Self {
        StreamItem {
            ids: &layout.input_ids,
            positions: &layout.input_positions,
            content_allow: &masks.content_allow,
            query_positions: &layout.query_positions,
            query_allow: &masks.query_allow,
        }
    }
}

/// Packed outputs: rows of all sequences stacked in item order.
#[derive(Debug, Clone)]
pub struct PackedOutput {
    /// `None` when `query_only` skipped the last content layer.
    pub content: Option<Var>,
    pub query: Option<Var>,
    pub content_offsets: Vec<usize>,
    pub query_offsets: Vec<usize>,
}

impl PackedOutput {
    pub fn content(&self) -> Result<Var> {
        self.content
            .ok_or_else(|| ModelError::Inconsistent("content stream output was skipped".into()))
    }
}

struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let keep = 1.0 - self.rate;
        let mask: Vec<f64> = (0..tape.value(x).len())
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let m = tape.constant(Tensor::new(shape, mask)?);
        Ok(tape.mul(x, m)?)
    }
}

fn maybe_dropout(d: &mut Option<Dropout>, tape: &mut Tape, x: Var) -> Result<Var> {
    match d {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}

/// Per-head relative bias for one sequence, one matrix per head.
fn gather_bias(
    tape: &mut Tape,
    table: Var,
    cfg: &ModelConfig,
    query_pos: &[usize],
    key_pos: &[usize],
) -> Result<Vec<Var>> {
    let (rows, cols) = (query_pos.len(), key_pos.len());
    let mut buckets = Vec::with_capacity(rows * cols);
    for &qp in query_pos {
        for &kp in key_pos {
            let delta = qp as i64 - kp as i64;
            buckets.push(relative_bucket(delta, cfg.rel_buckets, cfg.rel_max_dist));
        }
    }
    (0..cfg.heads)
        .map(|h| {
            let idx = buckets.iter().map(|b| b * cfg.heads + h).collect();
            Ok(tape.gather_flat(table, idx, vec![rows, cols])?)
        })
        .collect()
}

/// Attention inputs of one sequence within a stream.
struct Block<'a> {
    rows: (usize, usize),
    allow: &'a BoolMatrix,
    bias: Vec<Var>,
}

/// Keys and values of one layer, split per head then per sequence.
struct Memory {
    keys_t: Vec<Vec<Var>>,
    values: Vec<Vec<Var>>,
}

fn stream_layer(
    tape: &mut Tape,
    lv: &LayerVars,
    cfg: &ModelConfig,
    x: Var,
    mem: &Memory,
    blocks: &[Block<'_>],
    drop: &mut Option<Dropout>,
) -> Result<Var> {
    let dh = cfg.head_dim();
    let q = tape.matmul(x, lv.wq)?;
    let q = tape.add_row_bias(q, lv.bq)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let mut parts = Vec::with_capacity(blocks.len());
        for (i, blk) in blocks.iter().enumerate() {
            let (start, len) = blk.rows;
            if len == 0 {
                continue;
            }
            let qi = if len == tape.value(qh).shape()[0] {
                qh
            } else {
                tape.slice_rows(qh, start, len)?
            };
            let s = tape.matmul(qi, mem.keys_t[h][i])?;
            let mut s = tape.scale(s, scale)?;
            if let Some(&b) = blk.bias.get(h) {
                s = tape.add(s, b)?;
            }
            let p = tape.masked_softmax_rows(s, blk.allow)?;
            parts.push(tape.matmul(p, mem.values[h][i])?);
        }
        heads.push(if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)?
        });
    }
    let o = tape.concat_cols(&heads)?;
    let a = tape.matmul(o, lv.wo)?;
    let a = tape.add_row_bias(a, lv.bo)?;
    let a = maybe_dropout(drop, tape, a)?;
    let r = tape.add(x, a)?;
    let x1 = tape.layer_norm(r, lv.ln1_g, lv.ln1_b, LN_EPS)?;
    let f = tape.matmul(x1, lv.w1)?;
    let f = tape.add_row_bias(f, lv.b1)?;
    let f = tape.gelu(f)?;
    let f = tape.matmul(f, lv.w2)?;
    let f = tape.add_row_bias(f, lv.b2)?;
    let f = maybe_dropout(drop, tape, f)?;
    let r = tape.add(x1, f)?;
    Ok(tape.layer_norm(r, lv.ln2_g, lv.ln2_b, LN_EPS)?)
}

const LN_EPS: f64 = 1e-5;

/// Runs both streams over a batch of sequences stacked row-wise. Projections
/// are shared across the stack; attention is computed per sequence.
pub fn forward_packed(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    items: &[StreamItem<'_>],
    opts: &ForwardOptions,
) -> Result<PackedOutput> {
    let mut content_offsets = Vec::with_capacity(items.len() + 1);
    let mut query_offsets = Vec::with_capacity(items.len() + 1);
    let (mut lc, mut lq) = (0, 0);
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut qpos = Vec::new();
    for (i, it) in items.iter().enumerate() {
        let l = it.ids.len();
        if it.positions.len() != l
            || it.content_allow.rows() != l
            || it.content_allow.cols() != l
            || it.query_allow.cols() != l
            || it.query_allow.rows() != it.query_positions.len()
        {
            return Err(ModelError::Inconsistent(format!(
                "item {i}: {l} slots, content mask {}x{}, query mask {}x{}, {} query positions",
                it.content_allow.rows(),
                it.content_allow.cols(),
                it.query_allow.rows(),
                it.query_allow.cols(),
                it.query_positions.len()
            )));
        }
        if let Some(&id) = it.ids.iter().find(|&&id| id >= cfg.vocab) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: cfg.vocab,
            });
        }
        if let Some(&p) = it
            .positions
            .iter()
            .chain(it.query_positions)
            .find(|&&p| p >= cfg.max_pos)
        {
            return Err(ModelError::Overlength {
                len: p + 1,
                max: cfg.max_pos,
            });
        }
        content_offsets.push(lc);
        query_offsets.push(lq);
        ids.extend_from_slice(it.ids);
        positions.extend_from_slice(it.positions);
        qpos.extend_from_slice(it.query_positions);
        lc += l;
        lq += it.query_positions.len();
    }
    content_offsets.push(lc);
    query_offsets.push(lq);
    if lc == 0 {
        return Err(ModelError::Inconsistent("empty batch".into()));
    }

    let mut content_blocks = Vec::with_capacity(items.len());
    let mut query_blocks = Vec::with_capacity(items.len());
    for (i, it) in items.iter().enumerate() {
        let (cb, qb) = if cfg.rel_buckets > 0 {
            let cb = gather_bias(tape, pv.rel_bias(), cfg, it.positions, it.positions)?;
            let qb = if it.query_positions.is_empty() {
                Vec::new()
            } else {
                gather_bias(tape, pv.rel_bias(), cfg, it.query_positions, it.positions)?
            };
            (cb, qb)
        } else {
            (Vec::new(), Vec::new())
        };
        content_blocks.push(Block {
            rows: (content_offsets[i], it.ids.len()),
            allow: it.content_allow,
            bias: cb,
        });
        query_blocks.push(Block {
            rows: (query_offsets[i], it.query_positions.len()),
            allow: it.query_allow,
            bias: qb,
        });
    }

    let mut drop = opts.dropout.and_then(|(rate, seed)| {
        (rate > 0.0).then(|| Dropout {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    });

    let (ln_g, ln_b) = pv.emb_ln();
    let tok = tape.gather_rows(pv.tok_emb(), &ids)?;
    let pos = tape.gather_rows(pv.pos_emb(), &positions)?;
    let x = tape.add(tok, pos)?;
    let x = tape.layer_norm(x, ln_g, ln_b, LN_EPS)?;
    let mut content = maybe_dropout(&mut drop, tape, x)?;

    let mut query = if lq > 0 {
        let seed = match opts.query_init {
            QueryInit::Learned => tape.gather_rows(pv.query_vector(), &vec![0; lq])?,
            QueryInit::MaskToken => tape.gather_rows(pv.tok_emb(), &vec![MASK; lq])?,
        };
        let pos = tape.gather_rows(pv.pos_emb(), &qpos)?;
        let g = tape.add(seed, pos)?;
        let g = tape.layer_norm(g, ln_g, ln_b, LN_EPS)?;
        Some(maybe_dropout(&mut drop, tape, g)?)
    } else {
        None
    };

    let dh = cfg.head_dim();
    for layer in 0..cfg.layers {
        let lv = pv.layer(layer);
        let k = tape.matmul(content, lv.wk)?;
        let k = tape.add_row_bias(k, lv.bk)?;
        let v = tape.matmul(content, lv.wv)?;
        let v = tape.add_row_bias(v, lv.bv)?;
        let mut mem = Memory {
            keys_t: Vec::with_capacity(cfg.heads),
            values: Vec::with_capacity(cfg.heads),
        };
        for h in 0..cfg.heads {
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let mut ks = Vec::with_capacity(items.len());
            let mut vs = Vec::with_capacity(items.len());
            for blk in &content_blocks {
                let (start, len) = blk.rows;
                let (ki, vi) = if len == lc {
                    (kh, vh)
                } else {
                    (
                        tape.slice_rows(kh, start, len)?,
                        tape.slice_rows(vh, start, len)?,
                    )
                };
                ks.push(tape.transpose(ki)?);
                vs.push(vi);
            }
            mem.keys_t.push(ks);
            mem.values.push(vs);
        }
        let skip = opts.query_only && query.is_some() && layer + 1 == cfg.layers;
        let next_content = if skip {
            None
        } else {
            Some(stream_layer(tape, &lv, cfg, content, &mem, &content_blocks, &mut drop)?)
        };
        if let Some(g) = query {
            query = Some(stream_layer(
                tape,
                &lv,
                cfg,
                g,
                &mem,
                &query_blocks,
                &mut drop,
            )?);
        }
        match next_content {
            Some(c) => content = c,
            None => {
                return Ok(PackedOutput {
                    content: None,
                    query,
                    content_offsets,
                    query_offsets,
                })
            }
        }
    }
    Ok(PackedOutput {
        content: Some(content),
        query,
        content_offsets,
        query_offsets,
    })
}

/// Hidden rows times the tied embedding, transposed.
pub fn project_logits(tape: &mut Tape, pv: &ParamVars, hidden: Var) -> Result<Var> {
    let et = tape.transpose(pv.tok_emb())?;
    Ok(tape.matmul(hidden, et)?)
}

/// Content hiddens `[L x H]` and query-stream logits `[(n-c) x V]` for one
/// layout, without dropout.
pub fn forward_two_stream(
    params: &ModelParams,
    layout: &MpnetLayout,
    masks: &MaskPair,
) -> Result<(Tensor, Tensor)> {
    forward_two_stream_with(params, layout, masks, &ForwardOptions::default())
}

pub fn forward_two_stream_with(
    params: &ModelParams,
    layout: &MpnetLayout,
    masks: &MaskPair,
    opts: &ForwardOptions,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape);
    let out = forward_packed(
        &mut tape,
        &pv,
        &params.config,
        &[StreamItem::new(layout, masks)],
        opts,
    )?;
    let logits = match out.query {
        Some(q) => {
            let l = project_logits(&mut tape, &pv, q)?;
            tape.value(l).clone()
        }
        None => Tensor::zeros(&[0, params.config.vocab]),
    };
    Ok((tape.value(out.content()?).clone(), logits))
}

/// Plain bidirectional encoder over positions `0..n` (the fine-tuning path).
pub fn forward_single(params: &ModelParams, ids: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape);
    let h = forward_single_on(&mut tape, &pv, &params.config, ids, None)?;
    Ok(tape.value(h).clone())
}

pub fn forward_single_on(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    ids: &[usize],
    dropout: Option<(f64, u64)>,
) -> Result<Var> {
    if ids.len() > cfg.max_pos {
        return Err(ModelError::Overlength {
            len: ids.len(),
            max: cfg.max_pos,
        });
    }
    let n = ids.len();
    let positions: Vec<usize> = (0..n).collect();
    let allow = BoolMatrix::filled(n, n, true);
    let empty = BoolMatrix::new(0, n);
    let item = StreamItem {
        ids,
        positions: &positions,
        content_allow: &allow,
        query_positions: &[],
        query_allow: &empty,
    };
    let out = forward_packed(
        tape,
        pv,
        cfg,
        &[item],
        &ForwardOptions {
            dropout,
            query_init: QueryInit::Learned,
            query_only: false,
        },
    )?;
    out.content()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::masks_for;
    use crate::permute::{build_layout, Mode, PermutationPlan};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ffn: 12,
            vocab: 12,
            max_pos: 16,
            rel_buckets: 8,
            rel_max_dist: 16,
            dropout: 0.0,
            init_std: 0.5,
        }
    }

    fn paper_layout(mode: Mode) -> (MpnetLayout, MaskPair) {
        let plan = PermutationPlan::new(vec![0, 2, 4, 3, 5, 1], 3, mode).unwrap();
        let ids: Vec<usize> = (0..6).map(|i| 5 + i).collect();
        let layout = build_layout(&plan, &ids, None, 12, 0).unwrap();
        (layout, masks_for(&plan))
    }

    #[test]
    fn zero_params_give_uniform_logits() {
        let params = ModelParams::zeros(&tiny_config()).unwrap();
        let (layout, masks) = paper_layout(Mode::Mpnet);
        let (_, logits) = forward_two_stream(&params, &layout, &masks).unwrap();
        assert_eq!(logits.shape(), &[3, 12]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bucket_basics() {
        assert_eq!(relative_bucket(0, 32, 128), 0);
        assert_eq!(relative_bucket(1, 32, 128), 1);
        assert_eq!(relative_bucket(-1, 32, 128), 17);
        assert_eq!(relative_bucket(10_000, 32, 128), 15);
        assert_eq!(relative_bucket(-10_000, 32, 128), 31);
        assert_eq!(relative_bucket(7, 1, 128), 0);
        let mut prev = 0;
        for d in 0..600 {
            let b = relative_bucket(d, 32, 128);
            assert!(b >= prev);
            prev = b;
        }
    }

    /// Integer-only reference for 32 buckets up to distance 128: beyond the
    /// 8 exact offsets, bucket 8 + j for the largest j <= 7 with
    /// d^2 >= 64 * 2^j.
    fn bucket_reference(delta: i64) -> usize {
        let base = if delta < 0 { 16 } else { 0 };
        let d = delta.unsigned_abs();
        if d < 8 {
            return base + d as usize;
        }
        let j = (0..=7).rev().find(|&j| d * d >= 64 << j).expect("d >= 8");
        base + 8 + j
    }

    #[test]
    fn bucket_histogram_matches_integer_reference() {
        let mut ours = [0usize; 32];
        let mut reference = [0usize; 32];
        for d in -512..=512 {
            let b = relative_bucket(d, 32, 128);
            assert_eq!(b, bucket_reference(d), "delta {d}");
            ours[b] += 1;
            reference[bucket_reference(d)] += 1;
        }
        assert_eq!(ours, reference);
        // 8..11, 12..15, 16..22, 23..31, 32..45, 46..63, 64..90, then 91 up
        assert_eq!(&ours[8..16], &[4, 4, 7, 9, 14, 18, 27, 422]);
    }

    #[test]
    fn single_equals_identity_content_stream() {
        let mut cfg = tiny_config();
        cfg.layers = 3;
        let params = ModelParams::init(&cfg, 4).unwrap();
        let ids = [3, 7, 8, 9, 4];
        let single = forward_single(&params, &ids).unwrap();
        let layout = MpnetLayout {
            mode: Mode::Mlm,
            n: 5,
            c: 5,
            input_ids: ids.to_vec(),
            input_positions: (0..5).collect(),
            targets: vec![],
            corrupt_record: vec![],
            query_positions: vec![],
            readout_slots: vec![],
            roles: vec![crate::permute::SlotRole::Kept; 5],
        };
        let masks = MaskPair {
            content_allow: BoolMatrix::filled(5, 5, true),
            query_allow: BoolMatrix::new(0, 5),
        };
        let (content, _) = forward_two_stream(&params, &layout, &masks).unwrap();
        for (a, b) in single.data().iter().zip(content.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_rejects_overlength() {
        let params = ModelParams::zeros(&tiny_config()).unwrap();
        assert!(matches!(
            forward_single(&params, &[5; 17]),
            Err(ModelError::Overlength { len: 17, max: 16 })
        ));
    }

    #[test]
    fn relative_bias_ablation() {
        let mut cfg = tiny_config();
        let with_bias = ModelParams::init(&cfg, 2).unwrap();
        let ids = [3, 6, 7, 8, 4];
        let a = forward_single(&with_bias, &ids).unwrap();
        let mut no_bias = with_bias.clone();
        no_bias.config.rel_buckets = 0;
        let b = forward_single(&no_bias, &ids).unwrap();
        assert_ne!(a, b);

        cfg.rel_buckets = 1;
        let mut one_bucket = with_bias.clone();
        one_bucket.config = cfg;
        one_bucket.rel_bias = Tensor::zeros(&[1, 2]);
        let c = forward_single(&one_bucket, &ids).unwrap();
        assert_eq!(b.data(), c.data());
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        assert!(cfg.set("hidden", "16").unwrap());
        assert!(!cfg.set("bogus", "1").unwrap());
        assert!(cfg.set("layers", "x").is_err());
    }

    #[test]
    fn decay_classification() {
        assert!(decays("tok_emb"));
        assert!(decays("layer0.wq"));
        assert!(decays("query_vector"));
        assert!(!decays("layer1.bq"));
        assert!(!decays("layer1.ln2_g"));
        assert!(!decays("emb_ln_b"));
    }

    #[test]
    fn inconsistent_masks_rejected() {
        let params = ModelParams::init(&tiny_config(), 1).unwrap();
        let (layout, _) = paper_layout(Mode::Mpnet);
        let (_, wrong) = paper_layout(Mode::Mlm);
        assert!(matches!(
            forward_two_stream(&params, &layout, &wrong),
            Err(ModelError::Inconsistent(_))
        ));
    }
}
