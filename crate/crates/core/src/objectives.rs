//! Training losses for the four objectives, information accounting, and the
//! output-dependency demonstration.

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::masks::{masks_for, MaskPair};
use crate::model::{
    forward_packed, project_logits, ForwardOptions, ModelError, ModelParams, ParamVars, QueryInit,
    StreamItem,
};
use crate::permute::{
    build_layout_with, sample_plan_with, CorruptionPolicy, Mode, MpnetLayout, PermutationPlan,
    PlanError,
};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::{is_special, TokenizedSentence, MASK};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("batch has no predictable rows")]
    EmptyBatch,
    #[error("invalid ratio {0:?}: expected a decimal in (0, 1)")]
    BadRatio(String),
    #[error("info needs n >= 2, got {0}")]
    TooShort(usize),
}

impl From<crate::tensor::TensorError> for ObjectiveError {
    fn from(e: crate::tensor::TensorError) -> Self {
        ObjectiveError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSpec {
    pub mode: Mode,
    pub predict_ratio: f64,
    /// `None` keeps every mask slot as `[M]`.
    pub corruption: Option<CorruptionPolicy>,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        ObjectiveSpec {
            mode: Mode::Mpnet,
            predict_ratio: 0.15,
            corruption: Some(CorruptionPolicy::default()),
        }
    }
}

/// A sampled plan with its layout and masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub plan: PermutationPlan,
    pub layout: MpnetLayout,
    pub masks: MaskPair,
}

impl Prepared {
    pub fn from_plan(
        plan: PermutationPlan,
        ids: &[usize],
        corruption: Option<&CorruptionPolicy>,
        vocab: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layout = build_layout_with(&plan, ids, corruption, vocab, rng)?;
        let masks = masks_for(&plan);
        Ok(Prepared {
            plan,
            layout,
            masks,
        })
    }

    pub fn item(&self) -> StreamItem<'_> {
        StreamItem::new(&self.layout, &self.masks)
    }
}

/// Samples one plan per row; rows too short to predict from are skipped.
pub fn prepare_batch(
    spec: &ObjectiveSpec,
    rows: &[TokenizedSentence],
    vocab: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Prepared>> {
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let special: Vec<bool> = row.ids.iter().map(|&id| is_special(id)).collect();
        let plan = match sample_plan_with(
            &row.word_start,
            &special,
            spec.predict_ratio,
            spec.mode,
            rng,
        ) {
            Ok(p) => p,
            Err(PlanError::TooShort(_) | PlanError::NoMaskable | PlanError::NoContext) => continue,
            Err(e) => return Err(e.into()),
        };
        out.push(Prepared::from_plan(
            plan,
            &row.ids,
            spec.corruption.as_ref(),
            vocab,
            rng,
        )?);
    }
    if out.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    Ok(out)
}

/// Prediction logits for a packed batch, rows in item then step order.
pub fn prediction_logits(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &ModelParams,
    items: &[Prepared],
    opts: &ForwardOptions,
) -> Result<(Var, Vec<usize>)> {
    let stream: Vec<StreamItem<'_>> = items.iter().map(Prepared::item).collect();
    let opts = ForwardOptions {
        query_only: items.iter().all(|p| p.layout.mode.two_stream()),
        ..*opts
    };
    let out = forward_packed(tape, pv, &params.config, &stream, &opts)?;
    let targets: Vec<usize> = items
        .iter()
        .flat_map(|p| p.layout.targets.iter().copied())
        .collect();
    let single: Vec<bool> = items.iter().map(|p| !p.layout.mode.two_stream()).collect();
    let hidden = if single.iter().all(|&s| s) {
        let rows: Vec<usize> = items
            .iter()
            .zip(&out.content_offsets)
            .flat_map(|(p, &off)| p.layout.readout_slots.iter().map(move |&s| off + s))
            .collect();
        tape.gather_rows(out.content()?, &rows)?
    } else if single.iter().all(|&s| !s) {
        out.query.ok_or(ObjectiveError::EmptyBatch)?
    } else {
        return Err(
            ModelError::Inconsistent("batch mixes single- and two-stream modes".into()).into(),
        );
    };
    Ok((project_logits(tape, pv, hidden)?, targets))
}

/// Per-row negative log-likelihoods from a logits matrix.
pub fn token_nll(logits: &Tensor, targets: &[usize]) -> Vec<f64> {
    let vocab = logits.shape()[1];
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let row = &logits.data()[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&l| (l - max).exp()).sum();
            -(row[t] - max - z.ln())
        })
        .collect()
}

/// Mean loss and per-token nll over prepared items, without dropout.
pub fn prepared_loss(
    params: &ModelParams,
    items: &[Prepared],
    query_init: QueryInit,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape);
    let opts = ForwardOptions {
        dropout: None,
        query_init,
        ..Default::default()
    };
    let (logits, targets) = prediction_logits(&mut tape, &pv, params, items, &opts)?;
    let nll = token_nll(tape.value(logits), &targets);
    let mean = nll.iter().sum::<f64>() / nll.len() as f64;
    Ok((mean, nll))
}

/// Samples plans for `rows` from `seed` and evaluates the mean loss.
pub fn loss(
    spec: &ObjectiveSpec,
    params: &ModelParams,
    rows: &[TokenizedSentence],
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = prepare_batch(spec, rows, params.config.vocab, &mut rng)?;
    prepared_loss(params, &items, QueryInit::Learned)
}

/// Parses a decimal such as `0.15` into an exact fraction.
pub fn parse_ratio(text: &str) -> Result<Ratio<i64>> {
    let bad = || ObjectiveError::BadRatio(text.to_string());
    let t = text.trim();
    let (int, frac) = t.split_once('.').unwrap_or((t, ""));
    if int.is_empty() && frac.is_empty()
        || !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit())
        || frac.len() > 12
    {
        return Err(bad());
    }
    let den = 10i64.pow(frac.len() as u32);
    let int: i64 = if int.is_empty() {
        0
    } else {
        int.parse().map_err(|_| bad())?
    };
    let frac: i64 = if frac.is_empty() {
        0
    } else {
        frac.parse().map_err(|_| bad())?
    };
    let r = Ratio::new(int * den + frac, den);
    if r <= Ratio::from_integer(0) || r >= Ratio::from_integer(1) {
        return Err(bad());
    }
    Ok(r)
}

/// Exact share of tokens and positions a predicted token conditions on, on
/// average, for a sentence of `n` tokens with `k = ceil(ratio * n)` predicted.
pub fn info_fraction(mode: Mode, n: usize, ratio: Ratio<i64>) -> Result<(Ratio<i64>, Ratio<i64>)> {
    if n < 2 {
        return Err(ObjectiveError::TooShort(n));
    }
    let n = n as i64;
    let k = (ratio * n).ceil().to_integer().clamp(1, n - 1);
    let one = Ratio::from_integer(1);
    let unmasked = Ratio::new(n - k, n);
    // the t-th predicted token sees t-1 earlier ones: (k-1)/2 on average
    let dependent = unmasked + Ratio::new(k - 1, 2 * n);
    Ok(match mode {
        Mode::Mlm => (unmasked, one),
        Mode::Plm => (dependent, dependent),
        Mode::Mpnet | Mode::MlmOd => (dependent, one),
    })
}

/// The `n -> infinity` limit of [`info_fraction`].
pub fn info_fraction_limit(mode: Mode, ratio: Ratio<i64>) -> (Ratio<i64>, Ratio<i64>) {
    let one = Ratio::from_integer(1);
    let dependent = one - ratio / 2;
    match mode {
        Mode::Mlm => (one - ratio, one),
        Mode::Plm => (dependent, dependent),
        Mode::Mpnet | Mode::MlmOd => (dependent, one),
    }
}

/// Percentage to one decimal, rounded half up in exact arithmetic, with a
/// zero decimal dropped (`85%`, `92.5%`).
pub fn format_pct(r: Ratio<i64>) -> String {
    let tenths = (r * 1000 + Ratio::new(1, 2)).floor().to_integer();
    match tenths % 10 {
        0 => format!("{}%", tenths / 10),
        d => format!("{}.{d}%", tenths / 10),
    }
}

/// Probabilities of the second token of an adjacent pair under different
/// conditioning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DependencyReport {
    /// First token predicted first, then the second with the first visible.
    pub revealed: f64,
    /// Second token predicted first, with the first still masked.
    pub masked: f64,
}

impl DependencyReport {
    pub fn ratio(&self) -> f64 {
        self.revealed / self.masked
    }
}

fn pair_plan(n: usize, first: usize, second: usize, mode: Mode) -> Result<PermutationPlan> {
    let mut z: Vec<usize> = (0..n).filter(|&p| p != first && p != second).collect();
    let c = z.len();
    match mode {
        Mode::Mlm | Mode::MlmOd => {
            z.push(first.min(second));
            z.push(first.max(second));
        }
        _ => {
            z.push(first);
            z.push(second);
        }
    }
    Ok(PermutationPlan::new(z, c, mode)?)
}

fn prob_at(params: &ModelParams, prepared: &Prepared, step: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape);
    let (logits, targets) = prediction_logits(
        &mut tape,
        &pv,
        params,
        std::slice::from_ref(prepared),
        &ForwardOptions::default(),
    )?;
    Ok((-token_nll(tape.value(logits), &targets)[step]).exp())
}

/// Probability of `ids[second]` with both pair slots predicted and nothing
/// else hidden. Two-stream modes report both prediction orders; `mlm` has no
/// order, so both fields carry its marginal.
pub fn dependency_demo(
    params: &ModelParams,
    ids: &[usize],
    first: usize,
    second: usize,
    mode: Mode,
) -> Result<DependencyReport> {
    let n = ids.len();
    let prepare = |plan| {
        Prepared::from_plan(
            plan,
            ids,
            None,
            params.config.vocab,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
    };
    let second_step = |p: &Prepared| {
        p.plan
            .predicted()
            .iter()
            .position(|&x| x == second)
            .expect("second is predicted")
    };
    if !mode.two_stream() {
        let p = prepare(pair_plan(n, first, second, mode)?)?;
        let prob = prob_at(params, &p, second_step(&p))?;
        return Ok(DependencyReport {
            revealed: prob,
            masked: prob,
        });
    }
    let forward = prepare(pair_plan(n, first, second, mode)?)?;
    let revealed = prob_at(params, &forward, second_step(&forward))?;
    // second predicted first: for mlm_od this is only possible when it
    // precedes in the sentence, so fall back to the permuted order
    let backward_mode = if mode == Mode::MlmOd {
        Mode::Mpnet
    } else {
        mode
    };
    let backward = prepare(pair_plan(n, second, first, backward_mode)?)?;
    let masked = prob_at(params, &backward, second_step(&backward))?;
    Ok(DependencyReport { revealed, masked })
}

/// Renders a layout as `token@position` cells, `[M]` for mask slots.
pub fn render_layout(layout: &MpnetLayout, token: impl Fn(usize) -> String) -> String {
    layout
        .input_ids
        .iter()
        .zip(&layout.input_positions)
        .map(|(&id, &p)| {
            let t = if id == MASK {
                "[M]".to_string()
            } else {
                token(id)
            };
            format!("{t}@{}", p + 1)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::strip_compensation;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ffn: 12,
            vocab: 14,
            max_pos: 16,
            rel_buckets: 8,
            rel_max_dist: 16,
            dropout: 0.0,
            init_std: 0.4,
        }
    }

    fn sentence(ids: &[usize]) -> TokenizedSentence {
        TokenizedSentence {
            ids: ids.to_vec(),
            word_start: vec![true; ids.len()],
        }
    }

    #[test]
    fn zero_params_give_ln_v_in_every_mode() {
        let params = ModelParams::zeros(&cfg()).unwrap();
        let rows = vec![sentence(&[3, 6, 7, 8, 9, 10, 4]), sentence(&[3, 11, 12, 4])];
        for mode in Mode::ALL {
            let spec = ObjectiveSpec {
                mode,
                ..Default::default()
            };
            let (l, nll) = loss(&spec, &params, &rows, 5).unwrap();
            assert!((l - 14f64.ln()).abs() < 1e-12, "{mode}");
            assert!(nll.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn stripped_mpnet_equals_plm_bitwise() {
        let params = ModelParams::init(&cfg(), 3).unwrap();
        let ids = [5, 6, 7, 8, 9, 10];
        let plan = PermutationPlan::new(vec![0, 2, 4, 3, 5, 1], 3, Mode::Mpnet).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mp = Prepared::from_plan(plan.clone(), &ids, None, 14, &mut rng).unwrap();
        mp.masks = strip_compensation(&mp.masks, 6, 3);
        let plm = Prepared::from_plan(plan.with_mode(Mode::Plm), &ids, None, 14, &mut rng).unwrap();
        let a = prepared_loss(&params, &[mp], QueryInit::Learned).unwrap();
        let b = prepared_loss(&params, &[plm], QueryInit::Learned).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
    }

    #[test]
    fn independent_mlm_od_matches_mlm() {
        use crate::masks::ablate_output_dependency;
        let params = ModelParams::init(&cfg(), 8).unwrap();
        let ids = [3, 6, 7, 8, 9, 10, 4];
        let plan = PermutationPlan::new(vec![0, 1, 3, 4, 6, 2, 5], 5, Mode::MlmOd).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut od = Prepared::from_plan(plan.clone(), &ids, None, 14, &mut rng).unwrap();
        od.masks = ablate_output_dependency(&od.masks, 7, 5);
        let mlm = Prepared::from_plan(plan.with_mode(Mode::Mlm), &ids, None, 14, &mut rng).unwrap();
        let (_, a) = prepared_loss(&params, &[od], QueryInit::MaskToken).unwrap();
        let (_, b) = prepared_loss(&params, &[mlm], QueryInit::MaskToken).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn ratio_parsing_is_exact() {
        assert_eq!(parse_ratio("0.15").unwrap(), Ratio::new(3, 20));
        assert_eq!(parse_ratio(".5").unwrap(), Ratio::new(1, 2));
        for bad in ["", "1", "0", "1.5", "-0.1", "abc", "0.1.2"] {
            assert!(parse_ratio(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn info_limits() {
        let r = Ratio::new(3, 20);
        let show = |m| {
            let (t, p) = info_fraction_limit(m, r);
            (format_pct(t), format_pct(p))
        };
        assert_eq!(show(Mode::Mlm), ("85%".into(), "100%".into()));
        assert_eq!(show(Mode::Plm), ("92.5%".into(), "92.5%".into()));
        assert_eq!(show(Mode::Mpnet), ("92.5%".into(), "100%".into()));
    }

    #[test]
    fn info_finite_n_approaches_limit() {
        let r = Ratio::new(3, 20);
        let (t, p) = info_fraction(Mode::Mlm, 20, r).unwrap();
        assert_eq!((t, p), (Ratio::new(17, 20), Ratio::from_integer(1)));
        // k = 3 of n = 20: (17 + 1) / 20
        let (t, _) = info_fraction(Mode::Plm, 20, r).unwrap();
        assert_eq!(t, Ratio::new(18, 20));
        let (t, _) = info_fraction(Mode::Mpnet, 200_000, r).unwrap();
        assert!((t - Ratio::new(37, 40)) < Ratio::new(1, 10_000));
        assert!(info_fraction(Mode::Mpnet, 1, r).is_err());
    }

    #[test]
    fn untrained_demo_is_uniform() {
        let params = ModelParams::zeros(&cfg()).unwrap();
        let ids = [3, 6, 7, 8, 9, 4];
        for mode in [Mode::Mpnet, Mode::Mlm, Mode::Plm] {
            let r = dependency_demo(&params, &ids, 2, 3, mode).unwrap();
            assert!((r.revealed - 1.0 / 14.0).abs() < 1e-12);
            assert!((r.ratio() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pct_rounding() {
        assert_eq!(format_pct(Ratio::new(1, 3)), "33.3%");
        assert_eq!(format_pct(Ratio::new(2, 3)), "66.7%");
        assert_eq!(format_pct(Ratio::from_integer(1)), "100%");
        assert_eq!(format_pct(Ratio::new(1, 2000)), "0.1%");
        assert_eq!(format_pct(Ratio::new(1, 4000)), "0%");
    }
}
