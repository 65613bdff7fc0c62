//! Factorization-order sampling and the two-part input layout.
//!
//! Positions are 0-based throughout. A plan orders the sentence as
//! `z = (kept..., predicted...)`; the layout for the two-stream objectives is
//! `(x[z<c], [M] x (n-c), x[z>=c])` with positions `(z<c, z>=c, z>=c)`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tokenizer::{is_special, MASK, NUM_SPECIAL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Permuted prediction with position compensation.
    Mpnet,
    /// Permuted prediction, previous tokens and positions only.
    Plm,
    /// Independent prediction from masked input.
    Mlm,
    /// Original order, masked input, dependent prediction.
    MlmOd,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Mpnet, Mode::Plm, Mode::MlmOd, Mode::Mlm];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Mpnet => "mpnet",
            Mode::Plm => "plm",
            Mode::Mlm => "mlm",
            Mode::MlmOd => "mlm_od",
        }
    }

    /// Whether predictions come from the query stream.
    pub fn two_stream(self) -> bool {
        self != Mode::Mlm
    }

    pub fn permutes(self) -> bool {
        matches!(self, Mode::Mpnet | Mode::Plm)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mpnet" => Ok(Mode::Mpnet),
            "plm" => Ok(Mode::Plm),
            "mlm" => Ok(Mode::Mlm),
            "mlm_od" => Ok(Mode::MlmOd),
            other => Err(format!(
                "unknown mode `{other}` (expected mpnet, plm, mlm or mlm_od)"
            )),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("sequence has no maskable token")]
    NoMaskable,
    #[error("every token would be predicted; at least one must stay as context")]
    NoContext,
    #[error("sequence length must be at least 2, got {0}")]
    TooShort(usize),
    #[error("prediction ratio {0} outside (0, 1)")]
    BadRatio(f64),
    #[error("order is not a permutation of 0..{0}")]
    NotPermutation(usize),
    #[error("split {c} invalid for length {n}")]
    BadSplit { n: usize, c: usize },
    #[error("plan covers {plan} tokens but {ids} ids were given")]
    LengthMismatch { plan: usize, ids: usize },
    #[error("special token at position {0} selected for prediction")]
    SpecialTarget(usize),
    #[error("{what}: lengths {left} and {right} differ")]
    InputMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationPlan {
    n: usize,
    z: Vec<usize>,
    c: usize,
    mode: Mode,
    /// Per predicted step: true where a new whole word begins.
    group_start: Vec<bool>,
}

impl PermutationPlan {
    /// Plan from an explicit order; every predicted token is its own word.
    pub fn new(z: Vec<usize>, c: usize, mode: Mode) -> Result<Self, PlanError> {
        let n = z.len();
        if n < 2 {
            return Err(PlanError::TooShort(n));
        }
        let mut seen = vec![false; n];
        for &p in &z {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(PlanError::NotPermutation(n));
            }
        }
        if c == 0 || c >= n {
            return Err(PlanError::BadSplit { n, c });
        }
        Ok(PermutationPlan {
            n,
            z,
            c,
            mode,
            group_start: vec![true; n - c],
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn z(&self) -> &[usize] {
        &self.z
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn predicted(&self) -> &[usize] {
        &self.z[self.c..]
    }

    pub fn kept(&self) -> &[usize] {
        &self.z[..self.c]
    }

    pub fn group_start(&self) -> &[bool] {
        &self.group_start
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        PermutationPlan {
            mode,
            ..self.clone()
        }
    }

    /// Same kept/predicted split with both parts in ascending order.
    pub fn canonical(&self) -> Self {
        let mut kept = self.kept().to_vec();
        let mut pred = self.predicted().to_vec();
        kept.sort_unstable();
        pred.sort_unstable();
        let starts: std::collections::HashMap<usize, bool> = self
            .predicted()
            .iter()
            .copied()
            .zip(self.group_start.iter().copied())
            .collect();
        let group_start = pred.iter().map(|p| starts[p]).collect();
        kept.extend(pred);
        PermutationPlan {
            n: self.n,
            z: kept,
            c: self.c,
            mode: self.mode,
            group_start,
        }
    }
}

/// Prediction budget: `ceil(ratio * maskable)`, at least one.
pub fn prediction_budget(ratio: f64, maskable: usize) -> usize {
    ((ratio * maskable as f64 - 1e-9).ceil() as usize).max(1)
}

#[derive(Debug, Clone)]
struct Unit {
    positions: Vec<usize>,
    maskable: bool,
}

fn word_units(word_start: &[bool], special: &[bool]) -> Vec<Unit> {
    let mut units: Vec<Unit> = Vec::new();
    for i in 0..word_start.len() {
        if special[i] {
            units.push(Unit {
                positions: vec![i],
                maskable: false,
            });
            continue;
        }
        let continues =
            !word_start[i] && i > 0 && !special[i - 1] && units.last().is_some_and(|u| u.maskable);
        if continues {
            units.last_mut().unwrap().positions.push(i);
        } else {
            units.push(Unit {
                positions: vec![i],
                maskable: true,
            });
        }
    }
    units
}

/// Samples a whole-word factorization order and split point.
///
/// Words are shuffled as units, then maskable words are taken from the right
/// of the shuffled order until the predicted tokens reach the budget. For the
/// unpermuted modes both parts are re-sorted into original order.
pub fn sample_plan_with<R: Rng + ?Sized>(
    word_start: &[bool],
    special: &[bool],
    ratio: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<PermutationPlan, PlanError> {
    let n = word_start.len();
    if special.len() != n {
        return Err(PlanError::InputMismatch {
            what: "word_start/special",
            left: n,
            right: special.len(),
        });
    }
    if n < 2 {
        return Err(PlanError::TooShort(n));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(PlanError::BadRatio(ratio));
    }
    let mut units = word_units(word_start, special);
    let maskable: usize = units
        .iter()
        .filter(|u| u.maskable)
        .map(|u| u.positions.len())
        .sum();
    if maskable == 0 {
        return Err(PlanError::NoMaskable);
    }
    let budget = prediction_budget(ratio, maskable);
    units.shuffle(rng);

    let mut predicted_units = Vec::new();
    let mut taken = 0;
    for (i, u) in units.iter().enumerate().rev() {
        if taken >= budget {
            break;
        }
        if u.maskable {
            predicted_units.push(i);
            taken += u.positions.len();
        }
    }
    if taken >= n {
        return Err(PlanError::NoContext);
    }
    predicted_units.reverse();
    let is_pred: Vec<bool> = (0..units.len())
        .map(|i| predicted_units.contains(&i))
        .collect();

    let mut kept: Vec<usize> = Vec::with_capacity(n);
    let mut pred: Vec<(usize, bool)> = Vec::with_capacity(taken);
    for (u, &p) in units.iter().zip(&is_pred) {
        if p {
            for (j, &pos) in u.positions.iter().enumerate() {
                pred.push((pos, j == 0));
            }
        } else {
            kept.extend_from_slice(&u.positions);
        }
    }
    if !mode.permutes() {
        kept.sort_unstable();
        pred.sort_unstable_by_key(|&(pos, _)| pos);
    }
    let c = kept.len();
    let group_start = pred.iter().map(|&(_, s)| s).collect();
    kept.extend(pred.into_iter().map(|(pos, _)| pos));
    Ok(PermutationPlan {
        n,
        z: kept,
        c,
        mode,
        group_start,
    })
}

pub fn sample_plan(
    word_start: &[bool],
    special: &[bool],
    ratio: f64,
    mode: Mode,
    seed: u64,
) -> Result<PermutationPlan, PlanError> {
    sample_plan_with(
        word_start,
        special,
        ratio,
        mode,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

impl Corruption {
    pub fn as_str(self) -> &'static str {
        match self {
            Corruption::Mask => "mask",
            Corruption::Random => "random",
            Corruption::Keep => "keep",
        }
    }
}

/// Replacement probabilities for the mask slots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionPolicy {
    pub p_mask: f64,
    pub p_random: f64,
    pub p_keep: f64,
}

impl Default for CorruptionPolicy {
    fn default() -> Self {
        CorruptionPolicy {
            p_mask: 0.8,
            p_random: 0.1,
            p_keep: 0.1,
        }
    }
}

impl CorruptionPolicy {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Corruption {
        let u: f64 = rng.random::<f64>() * (self.p_mask + self.p_random + self.p_keep);
        if u < self.p_mask {
            Corruption::Mask
        } else if u < self.p_mask + self.p_random {
            Corruption::Random
        } else {
            Corruption::Keep
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotRole {
    Kept,
    Mask,
    Predicted,
}

impl SlotRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SlotRole::Kept => "kept",
            SlotRole::Mask => "mask",
            SlotRole::Predicted => "predicted",
        }
    }
}

/// Concrete model input for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MpnetLayout {
    pub mode: Mode,
    pub n: usize,
    pub c: usize,
    pub input_ids: Vec<usize>,
    pub input_positions: Vec<usize>,
    /// Uncorrupted predicted tokens, in prediction order.
    pub targets: Vec<usize>,
    pub corrupt_record: Vec<Corruption>,
    /// Position fed to the query stream at each prediction step.
    pub query_positions: Vec<usize>,
    /// Content slots a single-stream read-out predicts from (the mask slots).
    pub readout_slots: Vec<usize>,
    pub roles: Vec<SlotRole>,
}

impl MpnetLayout {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.targets.len()
    }

    /// Reorders slots by `order` (new slot i takes old slot `order[i]`).
    pub fn permute_slots(&self, order: &[usize]) -> MpnetLayout {
        let mut inverse = vec![0; order.len()];
        for (new, &old) in order.iter().enumerate() {
            inverse[old] = new;
        }
        MpnetLayout {
            input_ids: order.iter().map(|&o| self.input_ids[o]).collect(),
            input_positions: order.iter().map(|&o| self.input_positions[o]).collect(),
            readout_slots: self.readout_slots.iter().map(|&s| inverse[s]).collect(),
            roles: order.iter().map(|&o| self.roles[o]).collect(),
            ..self.clone()
        }
    }
}

/// Builds the input layout for `plan` over `ids`.
///
/// With a corruption policy, one draw is made per predicted whole word and
/// shared by its subwords; the appended predicted part always carries the
/// true tokens.
pub fn build_layout_with<R: Rng + ?Sized>(
    plan: &PermutationPlan,
    ids: &[usize],
    corrupt: Option<&CorruptionPolicy>,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MpnetLayout, PlanError> {
    let (n, c) = (plan.n, plan.c);
    if ids.len() != n {
        return Err(PlanError::LengthMismatch {
            plan: n,
            ids: ids.len(),
        });
    }
    if let Some(&p) = plan.predicted().iter().find(|&&p| is_special(ids[p])) {
        return Err(PlanError::SpecialTarget(p));
    }
    let targets: Vec<usize> = plan.predicted().iter().map(|&p| ids[p]).collect();

    let mut record = Vec::with_capacity(n - c);
    let mut mask_ids = Vec::with_capacity(n - c);
    let mut tag = Corruption::Mask;
    for (k, &target) in targets.iter().enumerate() {
        if plan.group_start[k] {
            tag = corrupt.map_or(Corruption::Mask, |p| p.draw(rng));
        }
        record.push(tag);
        mask_ids.push(match tag {
            Corruption::Mask => MASK,
            Corruption::Keep => target,
            Corruption::Random => rng.random_range(NUM_SPECIAL..vocab_size.max(NUM_SPECIAL + 1)),
        });
    }

    let mut input_ids: Vec<usize> = plan.kept().iter().map(|&p| ids[p]).collect();
    input_ids.extend_from_slice(&mask_ids);
    let mut input_positions: Vec<usize> = plan.z.clone();
    let mut roles = vec![SlotRole::Kept; c];
    roles.extend(std::iter::repeat_n(SlotRole::Mask, n - c));
    let query_positions = if plan.mode.two_stream() {
        input_ids.extend_from_slice(&targets);
        input_positions.extend_from_slice(plan.predicted());
        roles.extend(std::iter::repeat_n(SlotRole::Predicted, n - c));
        plan.predicted().to_vec()
    } else {
        Vec::new()
    };
    Ok(MpnetLayout {
        mode: plan.mode,
        n,
        c,
        input_ids,
        input_positions,
        targets,
        corrupt_record: record,
        query_positions,
        readout_slots: (c..n).collect(),
        roles,
    })
}

pub fn build_layout(
    plan: &PermutationPlan,
    ids: &[usize],
    corrupt: Option<&CorruptionPolicy>,
    vocab_size: usize,
    seed: u64,
) -> Result<MpnetLayout, PlanError> {
    build_layout_with(
        plan,
        ids,
        corrupt,
        vocab_size,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{CLS, SEP};

    fn paper_plan() -> PermutationPlan {
        PermutationPlan::new(vec![0, 2, 4, 3, 5, 1], 3, Mode::Mpnet).unwrap()
    }

    fn all_words(n: usize) -> (Vec<bool>, Vec<bool>) {
        (vec![true; n], vec![false; n])
    }

    #[test]
    fn seeded_sampling_can_reach_the_worked_order() {
        let (ws, sp) = all_words(6);
        let seed = (0..200_000u64)
            .find(|&s| {
                sample_plan(&ws, &sp, 0.5, Mode::Mpnet, s).unwrap().z() == [0, 2, 4, 3, 5, 1]
            })
            .expect("some seed yields z = (1,3,5,4,6,2)");
        let plan = sample_plan(&ws, &sp, 0.5, Mode::Mpnet, seed).unwrap();
        assert_eq!(plan.c(), 3);
        assert_eq!(plan.predicted(), &[3, 5, 1]);
    }

    #[test]
    fn figure_one_order_predicts_second_and_fourth() {
        let plan = PermutationPlan::new(vec![0, 2, 4, 1, 3], 3, Mode::Plm).unwrap();
        assert_eq!(plan.predicted(), &[1, 3]);
    }

    #[test]
    fn minimum_budget_is_one_token() {
        let plan = sample_plan(&[false, true], &[true, false], 0.15, Mode::Mpnet, 4).unwrap();
        assert_eq!(plan.n() - plan.c(), 1);
        assert_eq!(plan.predicted(), &[1]);
    }

    #[test]
    fn budget_ceiling_is_robust_to_rounding() {
        assert_eq!(prediction_budget(0.15, 20), 3);
        assert_eq!(prediction_budget(0.15, 21), 4);
        assert_eq!(prediction_budget(0.15, 1), 1);
    }

    #[test]
    fn specials_never_predicted_and_words_stay_whole() {
        // [CLS] ab c def [SEP], subwords: a|b, c, d|e|f
        let ws = [false, true, false, true, true, false, false, false];
        let sp = [true, false, false, false, false, false, false, true];
        for seed in 0..500 {
            let plan = sample_plan(&ws, &sp, 0.4, Mode::Mpnet, seed).unwrap();
            assert!(plan.kept().contains(&0) && plan.kept().contains(&7));
            let pred = plan.predicted();
            // each predicted word appears contiguously, subwords ascending
            for (k, &p) in pred.iter().enumerate() {
                if !plan.group_start()[k] {
                    assert_eq!(pred[k - 1] + 1, p);
                }
            }
            let mut words = std::collections::HashSet::new();
            for &p in pred {
                let word = match p {
                    1 | 2 => 0,
                    3 => 1,
                    _ => 2,
                };
                words.insert(word);
            }
            let expect: usize = words.iter().map(|w| [2, 1, 3][*w]).sum();
            assert_eq!(expect, pred.len());
        }
    }

    #[test]
    fn unpermuted_modes_are_ascending_in_both_parts() {
        let (ws, sp) = all_words(12);
        for mode in [Mode::Mlm, Mode::MlmOd] {
            for seed in 0..50 {
                let plan = sample_plan(&ws, &sp, 0.3, mode, seed).unwrap();
                assert!(plan.kept().windows(2).all(|w| w[0] < w[1]));
                assert!(plan.predicted().windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn sampling_errors() {
        assert_eq!(
            sample_plan(&[false, false], &[true, true], 0.15, Mode::Mpnet, 0),
            Err(PlanError::NoMaskable)
        );
        // one word spanning the whole sequence leaves no context
        assert_eq!(
            sample_plan(&[true, false], &[false, false], 0.15, Mode::Mpnet, 0),
            Err(PlanError::NoContext)
        );
        assert!(matches!(
            sample_plan(&[true, true], &[false, false], 1.0, Mode::Mpnet, 0),
            Err(PlanError::BadRatio(_))
        ));
    }

    #[test]
    fn explicit_plan_validation() {
        assert!(PermutationPlan::new(vec![0, 0, 1], 1, Mode::Mpnet).is_err());
        assert!(PermutationPlan::new(vec![0, 1, 2], 3, Mode::Mpnet).is_err());
        assert!(PermutationPlan::new(vec![0, 1, 2], 0, Mode::Mpnet).is_err());
    }

    #[test]
    fn worked_example_layout() {
        let ids: Vec<usize> = (0..6).map(|i| 10 + i).collect();
        let layout = build_layout(&paper_plan(), &ids, None, 100, 0).unwrap();
        let x = |i: usize| 10 + i - 1;
        assert_eq!(
            layout.input_ids,
            vec![x(1), x(3), x(5), MASK, MASK, MASK, x(4), x(6), x(2)]
        );
        let p: Vec<usize> = [1, 3, 5, 4, 6, 2, 4, 6, 2].iter().map(|v| v - 1).collect();
        assert_eq!(layout.input_positions, p);
        assert_eq!(layout.targets, vec![x(4), x(6), x(2)]);
        assert_eq!(layout.corrupt_record, vec![Corruption::Mask; 3]);
        assert_eq!(layout.query_positions, vec![3, 5, 1]);
        assert_eq!(layout.len(), 9);
    }

    #[test]
    fn mlm_layout_has_no_appended_part() {
        let ids: Vec<usize> = (0..6).map(|i| 10 + i).collect();
        let plan = paper_plan().with_mode(Mode::Mlm);
        let layout = build_layout(&plan, &ids, None, 100, 0).unwrap();
        assert_eq!(layout.len(), 6);
        assert_eq!(layout.input_ids[3..], [MASK; 3]);
        assert!(layout.query_positions.is_empty());
        assert_eq!(layout.readout_slots, vec![3, 4, 5]);
    }

    #[test]
    fn layout_rejects_mismatch_and_special_targets() {
        assert_eq!(
            build_layout(&paper_plan(), &[10; 5], None, 100, 0),
            Err(PlanError::LengthMismatch { plan: 6, ids: 5 })
        );
        let ids = [CLS, 10, 11, 12, 13, SEP];
        assert_eq!(
            build_layout(&paper_plan(), &ids, None, 100, 0),
            Err(PlanError::SpecialTarget(5))
        );
    }

    #[test]
    fn corruption_is_shared_within_words() {
        // ids grouped as words of 3 subwords
        let n = 31;
        let ws: Vec<bool> = (0..n).map(|i| i == 0 || (i - 1) % 3 == 0).collect();
        let mut sp = vec![false; n];
        sp[0] = true;
        let ids: Vec<usize> = (0..n).map(|i| if i == 0 { CLS } else { 10 + i }).collect();
        let policy = CorruptionPolicy::default();
        for seed in 0..300 {
            let plan = sample_plan(&ws, &sp, 0.5, Mode::Mpnet, seed).unwrap();
            let layout = build_layout(&plan, &ids, Some(&policy), 200, seed).unwrap();
            let mut tag = None;
            for (k, &rec) in layout.corrupt_record.iter().enumerate() {
                if plan.group_start()[k] {
                    tag = Some(rec);
                }
                assert_eq!(Some(rec), tag);
                let slot = layout.c + k;
                match rec {
                    Corruption::Mask => assert_eq!(layout.input_ids[slot], MASK),
                    Corruption::Keep => assert_eq!(layout.input_ids[slot], layout.targets[k]),
                    Corruption::Random => assert!(layout.input_ids[slot] >= NUM_SPECIAL),
                }
            }
            // the appended part always holds the truth
            assert_eq!(layout.input_ids[n..], layout.targets[..]);
        }
    }

    #[test]
    fn canonical_sorts_both_parts() {
        let plan = paper_plan().canonical();
        assert_eq!(plan.z(), &[0, 2, 4, 1, 3, 5]);
        assert_eq!(plan.c(), 3);
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

        proptest! {
            #[test]
            fn positions_cover_sentence_with_predicted_twice(
                n in 3usize..20,
                ratio in 0.05f64..0.6,
                seed in 0u64..1000,
            ) {
                let ws = vec![true; n];
                let mut sp = vec![false; n];
                sp[0] = true;
                let plan = sample_plan(&ws, &sp, ratio, Mode::Mpnet, seed).unwrap();
                let ids: Vec<usize> = (0..n).map(|i| if i == 0 { CLS } else { 10 + i }).collect();
                let layout = build_layout(&plan, &ids, None, 64, seed).unwrap();
                prop_assert_eq!(layout.len(), 2 * n - plan.c());
                let mut counts = vec![0; n];
                for &p in &layout.input_positions {
                    counts[p] += 1;
                }
                for p in 0..n {
                    let expect = if plan.predicted().contains(&p) { 2 } else { 1 };
                    prop_assert_eq!(counts[p], expect);
                }
                prop_assert!(layout.targets.iter().all(|&t| !is_special(t)));
            }
        }
    }
}
