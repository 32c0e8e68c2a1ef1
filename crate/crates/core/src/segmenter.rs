//! Clause segmentation: rule-based candidate boundaries refined by a learned
//! boundary scorer.
//!
//! Gap positions follow the convention `1..L`: gap `i` sits between the
//! tokens at (0-based) indices `i - 1` and `i`. Clauses are 0-based half-open
//! token ranges.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Instruction;
use crate::error::{Error, Result};
use crate::numerics::layers::Mlp;
use crate::numerics::{sigmoid, Graph, ParamStore, Tensor, Var};

pub const DEFAULT_BOUNDARY_THRESHOLD: f64 = 0.5;
const COHERENCE_WINDOW: usize = 2;

/// Marker lists for the rule-based pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRules {
    /// A boundary follows each of these tokens.
    pub after: Vec<String>,
    /// A boundary precedes each of these tokens unless it is the first or
    /// last token.
    pub before: Vec<String>,
}

impl Default for SegmentRules {
    fn default() -> Self {
        Self {
            after: [".", ",", ";"].map(String::from).to_vec(),
            before: ["and", "then", "after", "until"].map(String::from).to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundarySource {
    Coarse,
    Refined,
}

/// Strictly increasing gap positions in `1..len`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundarySet {
    pub positions: Vec<usize>,
    pub source: BoundarySource,
    pub len: usize,
}

impl BoundarySet {
    pub fn new(mut positions: Vec<usize>, source: BoundarySource, len: usize) -> Result<Self> {
        positions.sort_unstable();
        positions.dedup();
        if let Some(&bad) = positions.iter().find(|&&p| p == 0 || p >= len) {
            return Err(Error::Contract(format!(
                "boundary {bad} outside 1..{len}"
            )));
        }
        Ok(Self {
            positions,
            source,
            len,
        })
    }

    pub fn contains(&self, gap: usize) -> bool {
        self.positions.binary_search(&gap).is_ok()
    }

    /// 0/1 indicator over gaps `1..len`.
    pub fn indicator(&self) -> Vec<f64> {
        (1..self.len)
            .map(|gap| if self.contains(gap) { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Rule-based candidate boundaries.
pub fn segment_rules(inst: &Instruction, rules: &SegmentRules) -> BoundarySet {
    let len = inst.len();
    let mut positions = Vec::new();
    for (i, tok) in inst.token_texts.iter().enumerate() {
        if rules.after.iter().any(|m| m == tok) && i + 1 < len {
            positions.push(i + 1);
        }
        if rules.before.iter().any(|m| m == tok) && i > 0 && i + 1 < len {
            positions.push(i);
        }
    }
    BoundarySet::new(positions, BoundarySource::Coarse, len).expect("rule boundaries are in range")
}

/// Ordered contiguous clauses covering every token exactly once.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSet {
    pub clauses: Vec<Range<usize>>,
    pub len: usize,
}

impl SegmentSet {
    pub fn split(boundaries: &BoundarySet) -> Self {
        let mut clauses = Vec::with_capacity(boundaries.positions.len() + 1);
        let mut start = 0;
        for &gap in &boundaries.positions {
            clauses.push(start..gap);
            start = gap;
        }
        clauses.push(start..boundaries.len);
        Self {
            clauses,
            len: boundaries.len,
        }
    }

    /// Single clause spanning the whole instruction.
    pub fn whole(len: usize) -> Self {
        Self {
            clauses: std::iter::once(0..len).collect(),
            len,
        }
    }

    pub fn count(&self) -> usize {
        self.clauses.len()
    }

    pub fn tokens(&self, k: usize) -> Vec<usize> {
        self.clauses[k].clone().collect()
    }

    pub fn clause_of(&self, token: usize) -> usize {
        self.clauses
            .iter()
            .position(|c| c.contains(&token))
            .expect("token inside instruction")
    }

    /// `m × L` 0/1 matrix with `M[k, i] = 1` iff token `i` is in clause `k`.
    pub fn membership_matrix(&self) -> Tensor {
        let mut m = Tensor::zeros(self.count(), self.len);
        for (k, c) in self.clauses.iter().enumerate() {
            for i in c.clone() {
                m.set(k, i, 1.0);
            }
        }
        m
    }
}

/// Per-gap refinement features and confidences (each of length `L - 1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryScore {
    pub b_hat: Vec<f64>,
    pub prior: Vec<f64>,
    pub coherence: Vec<f64>,
}

impl BoundaryScore {
    /// Scores from raw scorer logits.
    pub fn from_logits(logits: &[f64], prior: Vec<f64>, coherence: Vec<f64>) -> Self {
        Self {
            b_hat: logits.iter().map(|&z| sigmoid(z)).collect(),
            prior,
            coherence,
        }
    }

    pub fn len(&self) -> usize {
        self.b_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b_hat.is_empty()
    }
}

/// Thresholds refined confidences (strictly greater than `delta_b`) and
/// splits the instruction at the surviving gaps.
pub fn refine(scores: &BoundaryScore, delta_b: f64) -> (BoundarySet, SegmentSet) {
    let len = scores.len() + 1;
    let positions = scores
        .b_hat
        .iter()
        .enumerate()
        .filter(|(_, &b)| b > delta_b)
        .map(|(i, _)| i + 1)
        .collect();
    let set = BoundarySet::new(positions, BoundarySource::Refined, len).expect("gaps in range");
    let segs = SegmentSet::split(&set);
    (set, segs)
}

/// Cosine similarity between the mean of up to two token rows left of each
/// gap and up to two rows right of it.
pub fn window_coherence(h: &Tensor) -> Vec<f64> {
    let len = h.rows();
    let mean = |range: Range<usize>| -> Vec<f64> {
        let n = range.len() as f64;
        let mut m = vec![0.0; h.cols()];
        for r in range {
            for (a, b) in m.iter_mut().zip(h.row(r)) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|a| *a /= n);
        m
    };
    (1..len)
        .map(|gap| {
            let left = mean(gap.saturating_sub(COHERENCE_WINDOW)..gap);
            let right = mean(gap..(gap + COHERENCE_WINDOW).min(len));
            let dot: f64 = left.iter().zip(&right).map(|(a, b)| a * b).sum();
            let nl = left.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nr = right.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nl == 0.0 || nr == 0.0 {
                0.0
            } else {
                dot / (nl * nr)
            }
        })
        .collect()
}

/// Learned boundary refinement over `[h_i; h_{i+1}; p_i; ψ_i]`.
#[derive(Clone, Debug)]
pub struct BoundaryScorer {
    pub mlp: Mlp,
    pub dim: usize,
}

/// Graph-side output of the scorer.
#[derive(Clone, Debug)]
pub struct ScoredBoundaries {
    pub score: BoundaryScore,
    /// `(L - 1) × 1` confidences, absent when `L = 1`.
    pub probs: Option<Var>,
}

impl BoundaryScorer {
    /// The hidden layer starts with one unit wired to the rule prior, so the
    /// untrained scorer reproduces the rule boundaries.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        let in_dim = 2 * dim + 2;
        let hidden = dim.max(2);
        let mlp = Mlp::new(store, "segmenter.scorer", in_dim, hidden, 1, rng);
        {
            let w = store.value_mut(mlp.hidden.weight);
            for r in 0..in_dim {
                w.set(r, 0, 0.0);
            }
            w.set(2 * dim, 0, 4.0);
        }
        store
            .value_mut(mlp.hidden.bias.expect("hidden bias"))
            .set(0, 0, -2.0);
        {
            let w = store.value_mut(mlp.output.weight);
            for r in 1..hidden {
                let v = w.get(r, 0) * 0.1;
                w.set(r, 0, v);
            }
            w.set(0, 0, 4.0);
        }
        Self { mlp, dim }
    }

    pub fn score(&self, g: &mut Graph, h: Var, coarse: &BoundarySet) -> Result<ScoredBoundaries> {
        let [len, dim] = g.shape(h);
        if coarse.len != len {
            return Err(Error::Contract(format!(
                "boundary set for {} tokens used with {len} token states",
                coarse.len
            )));
        }
        if len < 2 {
            return Ok(ScoredBoundaries {
                score: BoundaryScore {
                    b_hat: vec![],
                    prior: vec![],
                    coherence: vec![],
                },
                probs: None,
            });
        }
        if dim != self.dim {
            return Err(Error::Dimension {
                op: "score_boundaries",
                lhs: [len, dim],
                rhs: [len, self.dim],
            });
        }
        let prior = coarse.indicator();
        let coherence = window_coherence(g.value(h));
        let left_idx: Vec<usize> = (0..len - 1).collect();
        let right_idx: Vec<usize> = (1..len).collect();
        let left = g.gather_rows(h, &left_idx)?;
        let right = g.gather_rows(h, &right_idx)?;
        let p = g.constant(Tensor::col_vector(&prior));
        let psi = g.constant(Tensor::col_vector(&coherence));
        let x = g.concat_cols(&[left, right, p, psi])?;
        let logits = self.mlp.forward(g, x)?;
        let probs = g.sigmoid(logits);
        Ok(ScoredBoundaries {
            score: BoundaryScore {
                b_hat: g.value(probs).data().to_vec(),
                prior,
                coherence,
            },
            probs: Some(probs),
        })
    }
}

/// Per-token clause membership used to weight tokens inside each clause.
///
/// The forward value is exactly one for every token. The backward pass uses
/// the soft membership `Π (1 - b̂_g)` over the interior gaps between the
/// clause start and the token, so boundary confidences receive gradient
/// from the clause aggregation even though the split itself is hard.
pub fn clause_membership(g: &mut Graph, segs: &SegmentSet, probs: Option<Var>) -> Result<Var> {
    let len = segs.len;
    let Some(probs) = probs.filter(|&p| g.needs_grad(p)) else {
        return Ok(g.constant(Tensor::ones(len, 1)));
    };
    let mut cumulative = Tensor::zeros(len, len - 1);
    let mut any = false;
    for c in &segs.clauses {
        for i in c.clone() {
            for gap in c.start + 1..=i {
                cumulative.set(i, gap - 1, 1.0);
                any = true;
            }
        }
    }
    if !any {
        return Ok(g.constant(Tensor::ones(len, 1)));
    }
    let keep = g.scale(probs, -1.0);
    let keep = g.add_scalar(keep, 1.0);
    let log_keep = g.log(keep);
    let c = g.constant(cumulative);
    let summed = g.matmul(c, log_keep)?;
    let soft = g.exp(summed);
    g.straight_through(Tensor::ones(len, 1), soft)
}
