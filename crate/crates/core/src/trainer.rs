//! AdamW optimization for pre-training and classification fine-tuning, with
//! atomic checkpoints and deterministic resumption.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::model::{
    decays, forward_packed, ForwardOptions, ModelConfig, ModelError, ModelParams, StreamItem,
};
use crate::objectives::{prediction_logits, prepare_batch, ObjectiveError, ObjectiveSpec};
use crate::permute::{CorruptionPolicy, Mode};
use crate::tensor::{BoolMatrix, Tape, Tensor, TensorError};
use crate::tokenizer::{batch_iter, Batch, TokenizedSentence, TokenizerError, Vocab};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite gradient in {0}; step aborted")]
    NonFinite(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {msg}")]
    Data {
        path: String,
        line: usize,
        msg: String,
    },
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: Mode,
    pub predict_ratio: f64,
    /// Whether mask slots get the 8:1:1 replacement.
    pub corruption: bool,
    pub max_len: usize,
    pub clip_norm: f64,
    pub checkpoint_every: usize,
    /// Target vocabulary size for the tokenizer.
    pub vocab_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
            warmup_ratio: 0.06,
            total_steps: 2000,
            batch_size: 16,
            seed: 0,
            mode: Mode::Mpnet,
            predict_ratio: 0.15,
            corruption: true,
            max_len: 128,
            clip_norm: 1.0,
            checkpoint_every: 500,
            vocab_size: 1024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must be in [0, 1)");
        }
        if self.total_steps == 0 || self.batch_size == 0 {
            return bad("total_steps and batch_size must be positive");
        }
        if !(self.predict_ratio > 0.0 && self.predict_ratio < 1.0) {
            return bad("predict_ratio must be in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must be in [0, 1)");
        }
        if self.lr < 0.0 || self.eps <= 0.0 || self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return bad("lr, eps, weight_decay and clip_norm must be non-negative (eps, clip_norm positive)");
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveSpec {
        ObjectiveSpec {
            mode: self.mode,
            predict_ratio: self.predict_ratio,
            corruption: self.corruption.then(CorruptionPolicy::default),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            value.parse::<T>().map_err(|e| format!("{key}: {e}"))
        }
        match key {
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "warmup_ratio" => self.warmup_ratio = parse(key, value)?,
            "total_steps" | "steps" => self.total_steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "mode" => self.mode = parse(key, value)?,
            "predict_ratio" => self.predict_ratio = parse(key, value)?,
            "corruption" => self.corruption = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("warmup_ratio", self.warmup_ratio.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("mode", self.mode.to_string()),
            ("predict_ratio", self.predict_ratio.to_string()),
            ("corruption", self.corruption.to_string()),
            ("max_len", self.max_len.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
        ]
    }
}

/// Model and training settings read from one flat `key = value` file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Keys outside both configs (paths and the like), kept verbatim.
    pub other: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        if self.train.set(key, value)? || self.model.set(key, value)? {
            return Ok(());
        }
        self.other.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn parse(text: &str, origin: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| TrainError::Data {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            cfg.set(k.trim(), v.trim()).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        RunConfig::parse(&text, &path.display().to_string())
    }
}

/// Linear warmup from 0 to `lr`, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.total_steps;
    let warm = (cfg.warmup_ratio * total as f64).round() as usize;
    let step = step.min(total);
    if step < warm {
        cfg.lr * step as f64 / warm as f64
    } else if total == warm {
        cfg.lr
    } else {
        cfg.lr * (total - step) as f64 / (total - warm) as f64
    }
}

/// Adam moments, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![0.0; n], vec![0.0; n]))
            .unzip();
        AdamState { m, v, step: 0 }
    }
}

/// One bias-corrected Adam update with decoupled weight decay.
///
/// A tensor whose gradient is `None` is skipped entirely, decay included.
/// Every gradient is checked for finiteness before anything is modified.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Option<&[f64]>],
    decay: &[bool],
    state: &mut AdamState,
    cfg: &TrainConfig,
    lr: f64,
    names: &[String],
) -> Result<()> {
    for (i, g) in grads.iter().enumerate() {
        if g.is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(TrainError::NonFinite(
                names.get(i).cloned().unwrap_or_default(),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let Some(g) = grads[i] else { continue };
        let wd = if decay[i] { cfg.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= lr * (mhat / (vhat.sqrt() + cfg.eps) + wd * *w);
        }
    }
    Ok(())
}

/// Scales gradients in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads
            .iter_mut()
            .flatten()
            .for_each(|g| g.iter_mut().for_each(|v| *v *= s));
    }
    norm
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = a ^ b
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x632B_E59B_D9B1_11E9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub mode: Mode,
    pub loss: f64,
    pub tokens_per_sec: f64,
}

impl StepMetrics {
    pub fn line(&self) -> String {
        format!(
            "step={} mode={} loss={:.6} tokens_per_sec={:.1}",
            self.step, self.mode, self.loss, self.tokens_per_sec
        )
    }
}

/// Pre-training state: parameters, optimizer, data and position in the run.
pub struct Pretrainer {
    pub run: RunConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    pub step: usize,
    sentences: Vec<TokenizedSentence>,
    /// Packed batches of one pass; every epoch replays them in this order.
    batches: Option<Vec<Batch>>,
    names: Vec<String>,
    decay: Vec<bool>,
}

impl Pretrainer {
    /// Fresh run; `run.model.vocab` is replaced by the tokenizer's size.
    pub fn new(mut run: RunConfig, vocab: &Vocab, corpus: &[String]) -> Result<Self> {
        run.train.validate()?;
        run.model.vocab = vocab.len();
        if run.train.max_len > run.model.max_pos {
            return Err(TrainError::Config(format!(
                "max_len {} exceeds max_pos {}",
                run.train.max_len, run.model.max_pos
            )));
        }
        let params = ModelParams::init(&run.model, mix(run.train.seed, 0xA11CE))?;
        Self::from_parts(run, params, None, 0, vocab, corpus)
    }

    fn from_parts(
        run: RunConfig,
        params: ModelParams,
        adam: Option<AdamState>,
        step: usize,
        vocab: &Vocab,
        corpus: &[String],
    ) -> Result<Self> {
        let sentences: Vec<TokenizedSentence> = corpus
            .iter()
            .map(|line| vocab.encode(line).framed())
            .filter(|s| s.len() > 2)
            .collect();
        if sentences.is_empty() {
            return Err(TokenizerError::EmptyCorpus.into());
        }
        let named = params.named();
        let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
        let decay = names.iter().map(|n| decays(n)).collect();
        let adam = adam.unwrap_or_else(|| AdamState::new(named.iter().map(|(_, t)| t.len())));
        Ok(Pretrainer {
            run,
            params,
            adam,
            step,
            sentences,
            batches: None,
            names,
            decay,
        })
    }

    /// Restores a run from a checkpoint written by [`Pretrainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint, vocab: &Vocab, corpus: &[String]) -> Result<Self> {
        let mut run = RunConfig {
            model: ckpt.params.config.clone(),
            ..Default::default()
        };
        for (k, v) in &ckpt.meta {
            if let Some(key) = k.strip_prefix("train.") {
                run.train.set(key, v).map_err(TrainError::Config)?;
            }
        }
        let step: usize = ckpt
            .meta
            .get("step")
            .ok_or_else(|| TrainError::Config("checkpoint has no step".into()))?
            .parse()
            .map_err(|e| TrainError::Config(format!("checkpoint step: {e}")))?;
        if vocab.len() != run.model.vocab {
            return Err(TrainError::Config(format!(
                "vocabulary has {} entries, checkpoint expects {}",
                vocab.len(),
                run.model.vocab
            )));
        }
        let named = ckpt.params.named();
        let mut adam = AdamState {
            m: Vec::new(),
            v: Vec::new(),
            step: step as u64,
        };
        for (name, t) in &named {
            for (which, dst) in [("m", &mut adam.m), ("v", &mut adam.v)] {
                let key = format!("adam.{which}.{name}");
                let moment = ckpt
                    .extra(&key)
                    .ok_or_else(|| TrainError::Config(format!("checkpoint lacks {key}")))?;
                if moment.len() != t.len() {
                    return Err(TrainError::Config(format!("{key} has wrong size")));
                }
                dst.push(moment.data().to_vec());
            }
        }
        if let Some(s) = ckpt.meta.get("adam_step") {
            adam.step = s
                .parse()
                .map_err(|e| TrainError::Config(format!("adam_step: {e}")))?;
        }
        let params = ckpt.params.clone();
        Self::from_parts(run, params, Some(adam), step, vocab, corpus)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(self.params.clone());
        ckpt.meta.insert("step".into(), self.step.to_string());
        ckpt.meta
            .insert("adam_step".into(), self.adam.step.to_string());
        for (k, v) in self.run.train.entries() {
            ckpt.meta.insert(format!("train.{k}"), v);
        }
        for (i, name) in self.names.iter().enumerate() {
            let shape = self.params.named()[i].1.shape().to_vec();
            for (which, src) in [("m", &self.adam.m), ("v", &self.adam.v)] {
                let t = Tensor::new(shape.clone(), src[i].clone()).expect("moment matches shape");
                ckpt.extra.push((format!("adam.{which}.{name}"), t));
            }
        }
        ckpt
    }

    pub fn sentences(&self) -> &[TokenizedSentence] {
        &self.sentences
    }

    /// The batch used at `step`: epoch `e` is a fresh seeded shuffle.
    pub fn batch_for(&mut self, step: usize) -> Result<Batch> {
        if self.batches.is_none() {
            self.batches = Some(self.epoch_batches()?);
        }
        let batches = self.batches.as_ref().expect("filled above");
        Ok(batches[step % batches.len()].clone())
    }

    /// The sentence order is drawn once from the seed and kept for the whole
    /// run, so each sentence keeps its row and offset across epochs.
    fn epoch_batches(&self) -> Result<Vec<Batch>> {
        let t = &self.run.train;
        Ok(batch_iter(&self.sentences, t.max_len, t.batch_size, mix(t.seed, 0))?.collect())
    }

    /// Runs one optimizer step and returns its metrics.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let started = Instant::now();
        let step = self.step;
        let batch = self.batch_for(step)?;
        let rows = batch.rows();
        let spec = self.run.train.objective();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.run.train.seed, step as u64 + 1));
        let items = prepare_batch(&spec, &rows, self.params.config.vocab, &mut rng)?;
        let opts = ForwardOptions {
            dropout: Some((self.params.config.dropout, rng.random())),
            ..Default::default()
        };

        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape);
        let (logits, targets) = prediction_logits(&mut tape, &pv, &self.params, &items, &opts)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        tape.backward(loss)?;
        let loss_value = tape.value(loss).item();

        let mut grads: Vec<Option<Vec<f64>>> = pv
            .vars
            .iter()
            .map(|&v| tape.grad(v).map(<[f64]>::to_vec))
            .collect();
        drop(tape);
        clip_global_norm(&mut grads, self.run.train.clip_norm);
        let lr = lr_at(step + 1, &self.run.train);
        let grad_refs: Vec<Option<&[f64]>> = grads.iter().map(|g| g.as_deref()).collect();
        let mut tensors: Vec<&mut Tensor> = self
            .params
            .named_mut()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        adam_step(
            &mut tensors,
            &grad_refs,
            &self.decay,
            &mut self.adam,
            &self.run.train,
            lr,
            &self.names,
        )?;
        self.step += 1;
        let secs = started.elapsed().as_secs_f64().max(1e-9);
        Ok(StepMetrics {
            step: self.step,
            mode: spec.mode,
            loss: loss_value,
            tokens_per_sec: batch.token_count() as f64 / secs,
        })
    }

    /// Mean loss over the packed training batches without dropout or
    /// corruption, with plans drawn from `seed`.
    pub fn train_loss(&self, seed: u64) -> Result<f64> {
        let spec = ObjectiveSpec {
            corruption: None,
            ..self.run.train.objective()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in self.epoch_batches()? {
            let items = prepare_batch(&spec, &batch.rows(), self.params.config.vocab, &mut rng)?;
            let (mean, nll) =
                crate::objectives::prepared_loss(&self.params, &items, Default::default())?;
            total += mean * nll.len() as f64;
            count += nll.len();
        }
        Ok(total / count as f64)
    }
}

/// Where a pre-training run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn checkpoint_path(&self, step: usize) -> PathBuf {
        self.dir.join(format!("ckpt-{step:07}"))
    }
    pub fn final_path(&self) -> PathBuf {
        self.dir.join("final")
    }
    pub fn vocab_path(&self) -> PathBuf {
        self.dir.join("vocab.txt")
    }
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.log")
    }
}

/// Trains until `total_steps`, appending one metrics line per step to the
/// log and to `echo`, checkpointing periodically and at the end.
pub fn run_pretraining(
    trainer: &mut Pretrainer,
    out: Option<&RunOutput>,
    echo: &mut dyn Write,
) -> Result<Vec<StepMetrics>> {
    let mut log = match out {
        Some(o) => {
            std::fs::create_dir_all(&o.dir).map_err(|source| TrainError::Io {
                path: o.dir.clone(),
                source,
            })?;
            let path = o.metrics_path();
            Some((
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|source| TrainError::Io {
                        path: path.clone(),
                        source,
                    })?,
                path,
            ))
        }
        None => None,
    };
    let mut all = Vec::new();
    while trainer.step < trainer.run.train.total_steps {
        let m = trainer.train_step()?;
        let line = m.line();
        let _ = writeln!(echo, "{line}");
        if let Some((f, path)) = log.as_mut() {
            writeln!(f, "{line}").map_err(|source| TrainError::Io {
                path: path.clone(),
                source,
            })?;
        }
        if let Some(o) = out {
            let every = trainer.run.train.checkpoint_every;
            if every > 0
                && trainer.step % every == 0
                && trainer.step < trainer.run.train.total_steps
            {
                checkpoint::save(&o.checkpoint_path(trainer.step), &trainer.checkpoint())?;
            }
        }
        all.push(m);
    }
    if let Some(o) = out {
        checkpoint::save(&o.final_path(), &trainer.checkpoint())?;
    }
    Ok(all)
}

/// Settings for classification fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Share of the training file held out when no dev file is given.
    pub dev_fraction: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
            dev_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub label: String,
    pub text: String,
}

/// Parses `label<TAB>text` rows; blank lines are skipped.
pub fn parse_tsv(text: &str, origin: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line.split_once('\t').ok_or_else(|| TrainError::Data {
            path: origin.to_string(),
            line: i + 1,
            msg: "expected label<TAB>text".into(),
        })?;
        out.push(Example {
            label: label.trim().to_string(),
            text: body.trim().to_string(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub labels: Vec<String>,
    pub accuracy: f64,
    /// Dev share of the most frequent training label.
    pub majority_rate: f64,
    pub dev_size: usize,
    pub warnings: Vec<String>,
    /// Checksum of the query-stream vector before and after training.
    pub query_checksum: (u64, u64),
    pub head_weight: Tensor,
    pub head_bias: Tensor,
    pub params: ModelParams,
}

/// FNV-1a over the bit patterns of a tensor.
pub fn checksum(t: &Tensor) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in t.data() {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

fn encode_example(vocab: &Vocab, text: &str, max_pos: usize) -> TokenizedSentence {
    let mut s = vocab.encode(text).framed();
    if s.len() > max_pos {
        let last = *s.ids.last().expect("framed is non-empty");
        s.ids.truncate(max_pos - 1);
        s.ids.push(last);
        s.word_start.truncate(max_pos);
    }
    s
}

/// Logits `[batch x classes]` from the first-position hidden of each row.
fn classify(
    tape: &mut Tape,
    pv: &crate::model::ParamVars,
    cfg: &ModelConfig,
    head: (crate::tensor::Var, crate::tensor::Var),
    rows: &[&TokenizedSentence],
    dropout: Option<(f64, u64)>,
) -> Result<crate::tensor::Var> {
    let positions: Vec<Vec<usize>> = rows.iter().map(|r| (0..r.len()).collect()).collect();
    let allows: Vec<BoolMatrix> = rows
        .iter()
        .map(|r| BoolMatrix::filled(r.len(), r.len(), true))
        .collect();
    let empties: Vec<BoolMatrix> = rows.iter().map(|r| BoolMatrix::new(0, r.len())).collect();
    let items: Vec<StreamItem<'_>> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| StreamItem {
            ids: &r.ids,
            positions: &positions[i],
            content_allow: &allows[i],
            query_positions: &[],
            query_allow: &empties[i],
        })
        .collect();
    let out = forward_packed(
        tape,
        pv,
        cfg,
        &items,
        &ForwardOptions {
            dropout,
            ..Default::default()
        },
    )?;
    let cls_rows = &out.content_offsets[..rows.len()];
    let cls = tape.gather_rows(out.content()?, cls_rows)?;
    let logits = tape.matmul(cls, head.0)?;
    Ok(tape.add_row_bias(logits, head.1)?)
}

/// Trains a linear head on the first-position hidden state, updating the
/// encoder as well. Only the single-stream path runs, so the query vector
/// never receives a gradient.
pub fn finetune(
    params: &ModelParams,
    vocab: &Vocab,
    train: &[Example],
    dev: Option<&[Example]>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    let mut warnings = Vec::new();
    let (train, dev): (Vec<Example>, Vec<Example>) = match dev {
        Some(d) => (train.to_vec(), d.to_vec()),
        None => {
            let mut shuffled = train.to_vec();
            rand::seq::SliceRandom::shuffle(
                shuffled.as_mut_slice(),
                &mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0xDE7)),
            );
            let n_dev = ((shuffled.len() as f64 * cfg.dev_fraction).round() as usize)
                .clamp(1, shuffled.len().saturating_sub(1).max(1));
            let train = shuffled.split_off(n_dev);
            (train, shuffled)
        }
    };
    if train.is_empty() || dev.is_empty() {
        return Err(TrainError::Config(
            "fine-tuning needs non-empty train and dev splits".into(),
        ));
    }
    let labels: Vec<String> = train
        .iter()
        .map(|e| e.label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let label_id = |l: &str| labels.iter().position(|x| x == l);
    let k = labels.len();
    let mut counts = vec![0usize; k];
    for e in &train {
        counts[label_id(&e.label).expect("train label")] += 1;
    }
    let majority = (0..k)
        .max_by_key(|&i| (counts[i], std::cmp::Reverse(i)))
        .unwrap_or(0);

    let cfg_model = params.config.clone();
    let mut params = params.clone();
    let before = checksum(&params.query_vector);
    let h = cfg_model.hidden;
    let mut head_w = Tensor::zeros(&[h, k]);
    // zero weights and log-prior bias: an untrained head predicts the majority
    let mut head_b = Tensor::new(
        vec![k],
        counts
            .iter()
            .map(|&c| ((c as f64 + 1e-3) / train.len() as f64).ln())
            .collect(),
    )?;

    let train_rows: Vec<TokenizedSentence> = train
        .iter()
        .map(|e| encode_example(vocab, &e.text, cfg_model.max_pos))
        .collect();
    let train_y: Vec<usize> = train
        .iter()
        .map(|e| label_id(&e.label).expect("train label"))
        .collect();

    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let mut decay: Vec<bool> = names.iter().map(|n| decays(n)).collect();
    decay.extend([true, false]);
    let mut all_names = names.clone();
    all_names.extend(["head.w".to_string(), "head.b".to_string()]);
    let mut sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.len()).collect();
    sizes.extend([head_w.len(), head_b.len()]);
    let mut adam = AdamState::new(sizes);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size.max(1));
    let tcfg = TrainConfig {
        lr: cfg.lr,
        total_steps: (cfg.epochs * steps_per_epoch).max(1),
        ..TrainConfig::default()
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut global = 0usize;
    for epoch in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(
            order.as_mut_slice(),
            &mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64)),
        );
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut tape = Tape::new();
            let pv = params.bind(&mut tape);
            let hw = tape.leaf(head_w.clone().with_grad());
            let hb = tape.leaf(head_b.clone().with_grad());
            let rows: Vec<&TokenizedSentence> = chunk.iter().map(|&i| &train_rows[i]).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let dropout = Some((cfg_model.dropout, mix(cfg.seed ^ 0xF1, global as u64)));
            let logits = classify(&mut tape, &pv, &cfg_model, (hw, hb), &rows, dropout)?;
            let loss = tape.cross_entropy(logits, &ys)?;
            tape.backward(loss)?;
            let mut grads: Vec<Option<Vec<f64>>> = pv
                .vars
                .iter()
                .chain([&hw, &hb])
                .map(|&v| tape.grad(v).map(<[f64]>::to_vec))
                .collect();
            drop(tape);
            clip_global_norm(&mut grads, tcfg.clip_norm);
            let refs: Vec<Option<&[f64]>> = grads.iter().map(|g| g.as_deref()).collect();
            let mut tensors: Vec<&mut Tensor> =
                params.named_mut().into_iter().map(|(_, t)| t).collect();
            tensors.push(&mut head_w);
            tensors.push(&mut head_b);
            global += 1;
            adam_step(
                &mut tensors,
                &refs,
                &decay,
                &mut adam,
                &tcfg,
                lr_at(global, &tcfg),
                &all_names,
            )?;
        }
    }

    let mut correct = 0usize;
    let mut majority_hits = 0usize;
    for e in &dev {
        let truth = label_id(&e.label);
        if truth.is_none() {
            warnings.push(format!(
                "dev label {:?} not seen in training; counted wrong",
                e.label
            ));
        }
        if truth == Some(majority) {
            majority_hits += 1;
        }
        let row = encode_example(vocab, &e.text, cfg_model.max_pos);
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape);
        let hw = tape.constant(head_w.clone());
        let hb = tape.constant(head_b.clone());
        let logits = classify(&mut tape, &pv, &cfg_model, (hw, hb), &[&row], None)?;
        let scores = tape.value(logits).data();
        let pred = (0..k)
            .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
            .expect("at least one label");
        if truth == Some(pred) {
            correct += 1;
        }
    }
    let after = checksum(&params.query_vector);
    Ok(FinetuneReport {
        labels,
        accuracy: correct as f64 / dev.len() as f64,
        majority_rate: majority_hits as f64 / dev.len() as f64,
        dev_size: dev.len(),
        warnings,
        query_checksum: (before, after),
        head_weight: head_w,
        head_bias: head_b,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_cfg(lr: f64) -> TrainConfig {
        TrainConfig {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = quad_cfg(0.01);
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = [0.3, -4.0, 1e-3];
        let mut st = AdamState::new([3]);
        adam_step(
            &mut [&mut p],
            &[Some(&g)],
            &[true],
            &mut st,
            &cfg,
            0.01,
            &[],
        )
        .unwrap();
        let start = [1.0, -2.0, 0.5];
        for j in 0..3 {
            let expect = start[j] - 0.01 * g[j] / (g[j].abs() + 1e-6);
            assert!((p.data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let cfg = quad_cfg(0.1);
        let mut p = Tensor::new(vec![2], vec![0.7, -0.1]).unwrap();
        let mut st = AdamState::new([2]);
        adam_step(
            &mut [&mut p],
            &[Some(&[0.0, 0.0])],
            &[true],
            &mut st,
            &cfg,
            0.1,
            &[],
        )
        .unwrap();
        assert_eq!(p.data(), &[0.7, -0.1]);
    }

    /// Plain scalar Adam, written independently of `adam_step`.
    fn reference_adam(x0: f64, steps: usize, lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.98f64, 1e-6);
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + eps);
            out.push(x);
        }
        out
    }

    #[test]
    fn quadratic_bowl_matches_reference() {
        let cfg = quad_cfg(0.1);
        let mut x = Tensor::new(vec![2], vec![1.0, -1.5]).unwrap();
        let mut st = AdamState::new([2]);
        let ra = reference_adam(1.0, 50, 0.1);
        let rb = reference_adam(-1.5, 50, 0.1);
        for t in 0..50 {
            let g: Vec<f64> = x.data().to_vec();
            adam_step(
                &mut [&mut x],
                &[Some(&g)],
                &[false],
                &mut st,
                &cfg,
                0.1,
                &[],
            )
            .unwrap();
            assert!((x.data()[0] - ra[t]).abs() < 1e-12);
            assert!((x.data()[1] - rb[t]).abs() < 1e-12);
        }
        // constant-lr Adam settles into a shrinking oscillation of order lr
        assert!(x.data()[0].abs() < 0.05 && x.data()[1].abs() < 0.15);
        let mut x = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut st = AdamState::new([1]);
        for _ in 0..200 {
            let g: Vec<f64> = x.data().to_vec();
            adam_step(
                &mut [&mut x],
                &[Some(&g)],
                &[false],
                &mut st,
                &cfg,
                0.1,
                &[],
            )
            .unwrap();
        }
        assert!(x.data()[0].abs() < 1e-3, "{}", x.data()[0]);
    }

    #[test]
    fn non_finite_gradient_aborts_without_change() {
        let cfg = quad_cfg(0.1);
        let mut a = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut b = Tensor::new(vec![1], vec![2.0]).unwrap();
        let mut st = AdamState::new([1, 1]);
        let err = adam_step(
            &mut [&mut a, &mut b],
            &[Some(&[1.0]), Some(&[f64::NAN])],
            &[true, true],
            &mut st,
            &cfg,
            0.1,
            &["a".into(), "b".into()],
        )
        .unwrap_err();
        assert!(err.to_string().contains('b'));
        assert_eq!((a.data()[0], b.data()[0], st.step), (1.0, 2.0, 0));
    }

    #[test]
    fn missing_grad_skips_decay() {
        let cfg = TrainConfig::default();
        let mut p = Tensor::new(vec![1], vec![3.0]).unwrap();
        let mut st = AdamState::new([1]);
        adam_step(&mut [&mut p], &[None], &[true], &mut st, &cfg, 0.5, &[]).unwrap();
        assert_eq!(p.data()[0], 3.0);
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig {
            total_steps: 100,
            lr: 2.0,
            ..Default::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(6, &cfg), 2.0);
        assert_eq!(lr_at(3, &cfg), 1.0);
        assert_eq!(lr_at(100, &cfg), 0.0);
        let peak = (0..=100).map(|s| lr_at(s, &cfg)).fold(0.0, f64::max);
        assert_eq!(peak, 2.0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Some(vec![3.0, 4.0]), None];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let v = g[0].as_ref().unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn config_file_parsing() {
        let cfg = RunConfig::parse(
            "# desk run\nlr = 0.001\nlayers = 2\nmode = plm\ncorpus = data.txt\n",
            "cfg",
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.model.layers, 2);
        assert_eq!(cfg.train.mode, Mode::Plm);
        assert_eq!(cfg.other["corpus"], "data.txt");
        let err = RunConfig::parse("lr 0.1\n", "cfg").unwrap_err();
        assert!(err.to_string().contains("line 1"));
        assert!(RunConfig::parse("mode = bert\n", "cfg").is_err());
    }

    #[test]
    fn tsv_parsing() {
        let rows = parse_tsv("pos\tgood film\n\nneg\tbad\n", "f").unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].label, "neg");
        assert!(parse_tsv("no tab here\n", "f").is_err());
    }
}
