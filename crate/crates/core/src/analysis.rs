//! Brute-force verifiers: perturbation probes of what each prediction depends
//! on, the closure those dependencies should equal according to the masks,
//! finite-difference gradients and corruption frequencies.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::masks::MaskPair;
use crate::model::{ModelParams, QueryInit};
use crate::objectives::{prediction_logits, prepared_loss, ObjectiveError, Prepared};
use crate::permute::{
    build_layout_with, Corruption, CorruptionPolicy, MpnetLayout, PermutationPlan, SlotRole,
};
use crate::tensor::{Tape, Tensor};
use crate::tokenizer::{is_special, NUM_SPECIAL};

type Result<T> = std::result::Result<T, ObjectiveError>;

/// Original positions influencing each prediction step.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DependencyReport {
    pub tokens: Vec<BTreeSet<usize>>,
    pub positions: Vec<BTreeSet<usize>>,
}

fn set_text(s: &BTreeSet<usize>) -> String {
    s.iter()
        .map(|p| (p + 1).to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl DependencyReport {
    /// Tab-separated rows `step  predicts  tokens  positions`, 1-based.
    pub fn to_tsv(&self, plan: &PermutationPlan) -> String {
        let mut out = String::from("step\tpredicts\ttokens\tpositions\n");
        for (t, (tok, pos)) in self.tokens.iter().zip(&self.positions).enumerate() {
            let _ = writeln!(
                out,
                "{}\tx{}\t{}\t{}",
                plan.c() + t + 1,
                plan.predicted()[t] + 1,
                set_text(tok),
                set_text(pos)
            );
        }
        out
    }

    /// Aligned text table of the same content.
    pub fn to_table(&self, plan: &PermutationPlan) -> String {
        let rows: Vec<Vec<String>> = self
            .to_tsv(plan)
            .lines()
            .map(|l| l.split('\t').map(str::to_string).collect())
            .collect();
        let widths: Vec<usize> = (0..4)
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        rows.iter()
            .map(|r| {
                r.iter()
                    .zip(&widths)
                    .map(|(cell, w)| format!("{cell:<w$}"))
                    .collect::<Vec<_>>()
                    .join("  ")
                    .trim_end()
                    .to_string()
                    + "\n"
            })
            .collect()
    }
}

fn step_logits(params: &ModelParams, prepared: &Prepared) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape);
    let (logits, _) = prediction_logits(
        &mut tape,
        &pv,
        params,
        std::slice::from_ref(prepared),
        &Default::default(),
    )?;
    Ok(tape.value(logits).clone())
}

fn prepare_clean(plan: &PermutationPlan, ids: &[usize], vocab: usize) -> Result<Prepared> {
    Prepared::from_plan(
        plan.clone(),
        ids,
        None,
        vocab,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
}

fn changed_rows(base: &Tensor, other: &Tensor, tol: f64) -> Vec<bool> {
    (0..base.shape()[0])
        .map(|r| {
            base.row(r)
                .iter()
                .zip(other.row(r))
                .any(|(a, b)| (a - b).abs() > tol)
        })
        .collect()
}

/// Perturbation probe with corruption off.
///
/// Token sets: each position is cycled through every non-reserved id and a
/// step depends on it if any of its logits moves by more than 1e-12.
/// Position sets: each position's embedding row is shifted by a random
/// vector.
pub fn probe_dependencies(
    params: &ModelParams,
    plan: &PermutationPlan,
    ids: &[usize],
) -> Result<DependencyReport> {
    let vocab = params.config.vocab;
    let n = plan.n();
    let steps = n - plan.c();
    let base = step_logits(params, &prepare_clean(plan, ids, vocab)?)?;
    let mut tokens = vec![BTreeSet::new(); steps];
    let mut positions = vec![BTreeSet::new(); steps];
    for j in 0..n {
        for v in NUM_SPECIAL..vocab {
            if v == ids[j] {
                continue;
            }
            let mut swapped = ids.to_vec();
            swapped[j] = v;
            let out = step_logits(params, &prepare_clean(plan, &swapped, vocab)?)?;
            for (t, hit) in changed_rows(&base, &out, 1e-12).into_iter().enumerate() {
                if hit {
                    tokens[t].insert(j);
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xB0B);
    let prepared = prepare_clean(plan, ids, vocab)?;
    for j in 0..n {
        let mut shifted = params.clone();
        let h = shifted.config.hidden;
        for x in &mut shifted.pos_emb.data_mut()[j * h..(j + 1) * h] {
            *x += rng.random_range(-1.0..1.0);
        }
        let out = step_logits(&shifted, &prepared)?;
        for (t, hit) in changed_rows(&base, &out, 1e-12).into_iter().enumerate() {
            if hit {
                positions[t].insert(j);
            }
        }
    }
    Ok(DependencyReport { tokens, positions })
}

/// Slots whose layer-`depth` content hidden can reach each slot's hidden,
/// following allowed attention edges (every row allows itself).
fn reach(masks: &MaskPair, depth: usize) -> Vec<BTreeSet<usize>> {
    let l = masks.content_allow.rows();
    let mut sets: Vec<BTreeSet<usize>> = (0..l).map(|s| BTreeSet::from([s])).collect();
    for _ in 0..depth {
        sets = (0..l)
            .map(|s| {
                let mut acc: BTreeSet<usize> = BTreeSet::from([s]);
                for src in masks.content_allow.allowed(s) {
                    acc.extend(sets[src].iter().copied());
                }
                acc
            })
            .collect();
    }
    sets
}

fn slot_dependencies(
    layout: &MpnetLayout,
    plan: &PermutationPlan,
    slots: &BTreeSet<usize>,
) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let mut tokens = BTreeSet::new();
    let mut positions = BTreeSet::new();
    for &s in slots {
        positions.insert(layout.input_positions[s]);
        match layout.roles[s] {
            SlotRole::Kept => {
                tokens.insert(plan.z()[s]);
            }
            SlotRole::Predicted => {
                tokens.insert(layout.input_positions[s]);
            }
            SlotRole::Mask => {}
        }
    }
    (tokens, positions)
}

/// Dependency sets implied by transitive reachability through the masks for
/// a model with `layers` layers.
pub fn mask_closure(plan: &PermutationPlan, layers: usize) -> DependencyReport {
    let layout =
        crate::permute::build_layout(plan, &vec![NUM_SPECIAL; plan.n()], None, NUM_SPECIAL + 1, 0)
            .expect("placeholder ids are valid");
    let masks = crate::masks::masks_for(plan);
    let mut report = DependencyReport::default();
    if plan.mode().two_stream() {
        let r = reach(&masks, layers.saturating_sub(1));
        for q in 0..masks.query_allow.rows() {
            let mut slots = BTreeSet::new();
            for s in masks.query_allow.allowed(q) {
                slots.extend(r[s].iter().copied());
            }
            let (tok, mut pos) = slot_dependencies(&layout, plan, &slots);
            pos.insert(layout.query_positions[q]);
            report.tokens.push(tok);
            report.positions.push(pos);
        }
    } else {
        let r = reach(&masks, layers);
        for &slot in &layout.readout_slots {
            let (tok, pos) = slot_dependencies(&layout, plan, &r[slot]);
            report.tokens.push(tok);
            report.positions.push(pos);
        }
    }
    report
}

/// Checks bitwise invariance of step `t` logits to every token predicted at
/// or after `t`, over all non-reserved replacement ids. Returns the first
/// violation as `(step, position)`.
pub fn leak_violation(
    params: &ModelParams,
    plan: &PermutationPlan,
    ids: &[usize],
) -> Result<Option<(usize, usize)>> {
    let vocab = params.config.vocab;
    let base = step_logits(params, &prepare_clean(plan, ids, vocab)?)?;
    let pred = plan.predicted();
    for (s, &j) in pred.iter().enumerate() {
        for v in NUM_SPECIAL..vocab {
            if v == ids[j] {
                continue;
            }
            let mut swapped = ids.to_vec();
            swapped[j] = v;
            let out = step_logits(params, &prepare_clean(plan, &swapped, vocab)?)?;
            for t in 0..=s {
                let same = base
                    .row(t)
                    .iter()
                    .zip(out.row(t))
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                if !same {
                    return Ok(Some((t, j)));
                }
            }
        }
    }
    Ok(None)
}

/// Relative error used throughout: `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences of `f` at the listed coordinates of `x` against
/// `analytic`; returns the largest relative error.
pub fn fd_gradcheck(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    eps: f64,
) -> f64 {
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        probe[i] = x[i] + eps;
        let up = f(&probe);
        probe[i] = x[i] - eps;
        let down = f(&probe);
        probe[i] = x[i];
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * eps)));
    }
    worst
}

/// Sample of at least `per_tensor` coordinates (all if fewer exist).
fn sample_coords(len: usize, per_tensor: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len <= per_tensor {
        return (0..len).collect();
    }
    let mut picked = BTreeSet::new();
    while picked.len() < per_tensor {
        picked.insert(rng.random_range(0..len));
    }
    picked.into_iter().collect()
}

/// Per-tensor finite-difference report for the full prediction loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub per_tensor: Vec<(String, f64)>,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// End-to-end gradient check of the mean prediction loss over `items`.
/// Tensors the loss never reaches (zero analytic gradient) are still probed.
pub fn model_gradcheck(
    params: &ModelParams,
    items: &[Prepared],
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradReport> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape);
    let (logits, targets) = prediction_logits(&mut tape, &pv, params, items, &Default::default())?;
    let loss = tape.cross_entropy(logits, &targets)?;
    tape.backward(loss)?;
    let grads: Vec<Vec<f64>> = pv
        .vars
        .iter()
        .zip(params.named())
        .map(|(&v, (_, t))| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_tensor = Vec::new();
    for (i, (name, t)) in params.named().into_iter().enumerate() {
        let coords = sample_coords(t.len(), samples, &mut rng);
        let x = t.data().to_vec();
        let mut probe = params.clone();
        let err = fd_gradcheck(
            |v| {
                probe.named_mut()[i].1.data_mut().copy_from_slice(v);
                prepared_loss(&probe, items, QueryInit::Learned)
                    .map(|(l, _)| l)
                    .unwrap_or(f64::NAN)
            },
            &x,
            &grads[i],
            &coords,
            eps,
        );
        per_tensor.push((name, err));
    }
    Ok(GradReport { per_tensor })
}

/// Empirical `(mask, random, keep)` frequencies over `trials` draws; `None`
/// means corruption is off and every slot stays `[M]`.
pub fn corruption_stats(
    policy: Option<&CorruptionPolicy>,
    trials: usize,
    seed: u64,
) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = [0usize; 3];
    for _ in 0..trials {
        let tag = policy.map_or(Corruption::Mask, |p| p.draw(&mut rng));
        counts[match tag {
            Corruption::Mask => 0,
            Corruption::Random => 1,
            Corruption::Keep => 2,
        }] += 1;
    }
    let t = trials as f64;
    (
        counts[0] as f64 / t,
        counts[1] as f64 / t,
        counts[2] as f64 / t,
    )
}

/// Builds layouts for `words` random multi-subword words and counts words
/// whose subwords received different corruption tags.
pub fn whole_word_violations(words: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = CorruptionPolicy::default();
    let mut checked = 0;
    let mut violations = 0;
    while checked < words {
        // a sentence of single-token words with one long word in the middle
        let pieces = rng.random_range(2..=4);
        let n = 4 + pieces;
        let mut word_start = vec![true; n];
        for ws in word_start.iter_mut().skip(3).take(pieces - 1) {
            *ws = false;
        }
        let ids: Vec<usize> = (0..n).map(|_| rng.random_range(NUM_SPECIAL..40)).collect();
        let special: Vec<bool> = ids.iter().map(|&i| is_special(i)).collect();
        let Ok(plan) = crate::permute::sample_plan_with(
            &word_start,
            &special,
            0.5,
            crate::permute::Mode::Mpnet,
            &mut rng,
        ) else {
            continue;
        };
        let long: Vec<usize> = (2..2 + pieces).collect();
        let steps: Vec<usize> = plan
            .predicted()
            .iter()
            .enumerate()
            .filter(|(_, p)| long.contains(p))
            .map(|(s, _)| s)
            .collect();
        if steps.len() != pieces {
            continue;
        }
        let layout = build_layout_with(&plan, &ids, Some(&policy), 40, &mut rng)
            .expect("valid plan and ids");
        checked += 1;
        let first = layout.corrupt_record[steps[0]];
        if steps.iter().any(|&s| layout.corrupt_record[s] != first) {
            violations += 1;
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::permute::Mode;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ffn: 12,
            vocab: 9,
            max_pos: 8,
            rel_buckets: 8,
            rel_max_dist: 8,
            dropout: 0.0,
            init_std: 0.5,
        }
    }

    #[test]
    fn linear_layer_gradcheck() {
        // f(w) = sum_i (w . x_i)^2 / 2
        let xs = [[0.3, -1.2, 0.5], [1.1, 0.4, -0.7]];
        let f = |w: &[f64]| {
            xs.iter()
                .map(|x| {
                    let d: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
                    d * d / 2.0
                })
                .sum::<f64>()
        };
        let w = [0.2, -0.4, 0.9];
        let mut g = [0.0; 3];
        for x in &xs {
            let d: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            for j in 0..3 {
                g[j] += d * x[j];
            }
        }
        assert!(fd_gradcheck(f, &w, &g, &[0, 1, 2], 1e-5) < 1e-8);
    }

    #[test]
    fn paper_example_closures() {
        let z = vec![0, 2, 4, 3, 5, 1];
        let all: BTreeSet<usize> = (0..6).collect();
        let mp = mask_closure(&PermutationPlan::new(z.clone(), 3, Mode::Mpnet).unwrap(), 2);
        assert_eq!(mp.tokens[1], BTreeSet::from([0, 2, 4, 3]));
        assert_eq!(mp.positions[1], all);
        let plm = mask_closure(&PermutationPlan::new(z.clone(), 3, Mode::Plm).unwrap(), 2);
        assert_eq!(plm.positions[1], BTreeSet::from([0, 2, 4, 3, 5]));
        let mlm = mask_closure(
            &PermutationPlan::new(vec![0, 2, 4, 1, 3, 5], 3, Mode::Mlm).unwrap(),
            2,
        );
        assert_eq!(mlm.tokens[0], BTreeSet::from([0, 2, 4]));
        assert_eq!(mlm.positions[2], all);
    }

    #[test]
    fn probe_matches_closure_on_example() {
        let params = ModelParams::init(&cfg(), 5).unwrap();
        let ids = [5, 6, 7, 8, 5, 6];
        for mode in Mode::ALL {
            let z = if mode.permutes() {
                vec![0, 2, 4, 3, 5, 1]
            } else {
                vec![0, 2, 4, 1, 3, 5]
            };
            let plan = PermutationPlan::new(z, 3, mode).unwrap();
            let probed = probe_dependencies(&params, &plan, &ids).unwrap();
            assert_eq!(probed, mask_closure(&plan, 2), "{mode}");
            assert_eq!(leak_violation(&params, &plan, &ids).unwrap(), None);
        }
    }

    #[test]
    fn corruption_frequencies() {
        assert_eq!(corruption_stats(None, 10_000, 0), (1.0, 0.0, 0.0));
        let (m, r, k) = corruption_stats(Some(&CorruptionPolicy::default()), 100_000, 1);
        assert!((m - 0.8).abs() < 0.012 && (r - 0.1).abs() < 0.012 && (k - 0.1).abs() < 0.012);
    }

    #[test]
    fn whole_words_share_tags() {
        assert_eq!(whole_word_violations(1000, 3), 0);
    }

    #[test]
    fn report_tsv_is_one_based() {
        let plan = PermutationPlan::new(vec![0, 2, 4, 3, 5, 1], 3, Mode::Mpnet).unwrap();
        let tsv = mask_closure(&plan, 1).to_tsv(&plan);
        assert_eq!(tsv.lines().nth(1).unwrap(), "4\tx4\t1,3,5\t1,2,3,4,5,6");
    }
}
