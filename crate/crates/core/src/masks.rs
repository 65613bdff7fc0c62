//! Attention permissions for the content and query streams.
//!
//! Slot layout for the two-stream modes (0-based, step `k` predicts `z[k]`):
//! kept slots `0..c`, mask slot `k` for every `k in c..n`, and the true-token
//! slot `n + k - c`. Non-predicted rows (slots `0..n`) never attend into the
//! true-token slots.

use std::fmt::Write as _;

use thiserror::Error;

use crate::permute::{Mode, PermutationPlan};
use crate::tensor::BoolMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{builder} cannot build masks for mode {mode}")]
pub struct WrongMode {
    pub builder: &'static str,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPair {
    pub content_allow: BoolMatrix,
    pub query_allow: BoolMatrix,
}

impl MaskPair {
    /// Reorders slots: content rows and all columns follow `order` (new slot
    /// i is old slot `order[i]`); query rows keep their step order.
    pub fn permute_slots(&self, order: &[usize]) -> MaskPair {
        let l = order.len();
        let mut content = BoolMatrix::new(l, l);
        for (ri, &ro) in order.iter().enumerate() {
            for (ci, &co) in order.iter().enumerate() {
                content.set(ri, ci, self.content_allow.get(ro, co));
            }
        }
        let q = self.query_allow.rows();
        let mut query = BoolMatrix::new(q, l);
        for r in 0..q {
            for (ci, &co) in order.iter().enumerate() {
                query.set(r, ci, self.query_allow.get(r, co));
            }
        }
        MaskPair {
            content_allow: content,
            query_allow: query,
        }
    }

    /// Text dump: per stream a `stream rows cols` header, then one line of
    /// 0/1 characters per row.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, m) in [
            ("content", &self.content_allow),
            ("query", &self.query_allow),
        ] {
            let _ = writeln!(out, "{name} {} {}", m.rows(), m.cols());
            for r in 0..m.rows() {
                let line: String = m
                    .row(r)
                    .iter()
                    .map(|&b| if b { '1' } else { '0' })
                    .collect();
                out.push_str(&line);
                out.push('\n');
            }
        }
        out
    }
}

fn token_slot(n: usize, c: usize, k: usize) -> usize {
    n + k - c
}

/// Masks with position compensation: every row sees exactly `n` slots.
pub fn mpnet_masks(plan: &PermutationPlan) -> Result<MaskPair, WrongMode> {
    if !matches!(plan.mode(), Mode::Mpnet | Mode::MlmOd) {
        return Err(WrongMode {
            builder: "mpnet_masks",
            mode: plan.mode(),
        });
    }
    let (n, c) = (plan.n(), plan.c());
    let l = 2 * n - c;
    let mut content = BoolMatrix::new(l, l);
    for r in 0..n {
        for s in 0..n {
            content.set(r, s, true);
        }
    }
    let mut query = BoolMatrix::new(n - c, l);
    for k in c..n {
        let row = token_slot(n, c, k);
        let q = k - c;
        for s in 0..c {
            content.set(row, s, true);
            query.set(q, s, true);
        }
        // compensation: the masks of everything not yet predicted
        for j in k + 1..n {
            content.set(row, j, true);
        }
        for j in k..n {
            query.set(q, j, true);
        }
        for j in c..k {
            content.set(row, token_slot(n, c, j), true);
            query.set(q, token_slot(n, c, j), true);
        }
        content.set(row, row, true);
    }
    Ok(MaskPair {
        content_allow: content,
        query_allow: query,
    })
}

/// Masks without compensation: step `k` sees the kept tokens, the earlier
/// predicted tokens, and its own mask slot as a position carrier.
pub fn plm_masks(plan: &PermutationPlan) -> Result<MaskPair, WrongMode> {
    if plan.mode() != Mode::Plm {
        return Err(WrongMode {
            builder: "plm_masks",
            mode: plan.mode(),
        });
    }
    let (n, c) = (plan.n(), plan.c());
    let l = 2 * n - c;
    let mut content = BoolMatrix::new(l, l);
    for r in 0..c {
        for s in 0..c {
            content.set(r, s, true);
        }
    }
    let mut query = BoolMatrix::new(n - c, l);
    for k in c..n {
        // the mask slot itself only carries its position
        for s in 0..c {
            content.set(k, s, true);
        }
        content.set(k, k, true);

        let row = token_slot(n, c, k);
        let q = k - c;
        for s in 0..c {
            content.set(row, s, true);
            query.set(q, s, true);
        }
        for j in c..k {
            content.set(row, token_slot(n, c, j), true);
            query.set(q, token_slot(n, c, j), true);
        }
        content.set(row, row, true);
        query.set(q, k, true);
    }
    Ok(MaskPair {
        content_allow: content,
        query_allow: query,
    })
}

/// Full bidirectional attention over `(x[z<c], [M]...)`, no query stream.
pub fn mlm_masks(plan: &PermutationPlan) -> Result<MaskPair, WrongMode> {
    if plan.mode() != Mode::Mlm {
        return Err(WrongMode {
            builder: "mlm_masks",
            mode: plan.mode(),
        });
    }
    let n = plan.n();
    Ok(MaskPair {
        content_allow: BoolMatrix::filled(n, n, true),
        query_allow: BoolMatrix::new(0, n),
    })
}

pub fn masks_for(plan: &PermutationPlan) -> MaskPair {
    match plan.mode() {
        Mode::Mpnet | Mode::MlmOd => mpnet_masks(plan),
        Mode::Plm => plm_masks(plan),
        Mode::Mlm => mlm_masks(plan),
    }
    .expect("dispatch matches mode")
}

/// Removes every permission into a mask slot except a row's own position
/// carrier (query row `k` keeps mask slot `k`; mask slot `k` keeps itself).
pub fn strip_compensation(pair: &MaskPair, n: usize, c: usize) -> MaskPair {
    let mut out = pair.clone();
    let l = pair.content_allow.rows();
    for r in 0..l {
        for j in c..n {
            if r != j {
                out.content_allow.set(r, j, false);
            }
        }
    }
    for q in 0..pair.query_allow.rows() {
        for j in c..n {
            if j != c + q {
                out.query_allow.set(q, j, false);
            }
        }
    }
    out
}

/// Drops output dependency: each query row attends exactly like the content
/// row of its own mask slot, so no step sees another predicted token.
pub fn ablate_output_dependency(pair: &MaskPair, n: usize, c: usize) -> MaskPair {
    let mut out = pair.clone();
    let cols = pair.query_allow.cols();
    for q in 0..pair.query_allow.rows() {
        for s in 0..cols {
            out.query_allow
                .set(q, s, pair.content_allow.get(c + q, s) && s < n);
        }
    }
    out
}
