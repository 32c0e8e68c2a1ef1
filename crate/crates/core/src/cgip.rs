//! Sub-instruction picker: grounds the initial instruction state against the
//! observation, aggregates token relevance into clause scores and routes to a
//! single active clause.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::{Linear, Mlp, MultiHeadAttention};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::segmenter::SegmentSet;

/// Bound applied to clause-weight logits before exponentiation.
pub const WEIGHT_LOGIT_CLAMP: f64 = 30.0;

/// Added to the diagonal of the query and key projections at initialisation.
pub const MATCHING_BIAS: f64 = 1.0;

/// Visual feature matrix `V_t` (`N × d`) at step `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub features: Tensor,
    pub step: usize,
}

impl Observation {
    pub fn new(features: Tensor, step: usize) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Input("observation has no visual tokens".into()));
        }
        if !features.is_finite() {
            return Err(Error::Input("observation has non-finite entries".into()));
        }
        Ok(Self { features, step })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Per-step picker diagnostics. `k_star` is 0-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClauseRelevance {
    pub u: Tensor,
    pub r: Vec<f64>,
    pub w: Vec<f64>,
    pub phi: Vec<f64>,
    pub alpha: Vec<f64>,
    pub k_star: usize,
}

/// Routing result.
#[derive(Clone, Copy, Debug)]
pub struct Routed {
    /// `1 × m` soft distribution.
    pub alpha: Var,
    /// `1 × m` selection: one-hot forward; in train mode it backpropagates
    /// as `alpha`, in infer mode it is a constant.
    pub selection: Var,
    pub k_star: usize,
}

/// Softmax over `φ` and top-1 selection with lowest-index ties.
pub fn route(g: &mut Graph, phi: Var, mode: Mode) -> Result<Routed> {
    let [rows, m] = g.shape(phi);
    if rows != 1 || m == 0 {
        return Err(Error::Contract(format!(
            "clause scores must be a non-empty row, got {rows} x {m}"
        )));
    }
    let alpha = g.softmax_rows(phi);
    let k_star = g.value(alpha).argmax();
    let mut hard = Tensor::zeros(1, m);
    hard.set(0, k_star, 1.0);
    let selection = match mode {
        Mode::Train => g.straight_through(hard, alpha)?,
        Mode::Infer => g.constant(hard),
    };
    Ok(Routed {
        alpha,
        selection,
        k_star,
    })
}

/// Graph handles produced by one picker step.
#[derive(Clone, Debug)]
pub struct CgipOutput {
    /// Token indices of the selected clause.
    pub tokens: Vec<usize>,
    /// `L × 1` token mask `Mᵀ·selection`: exactly 1 on selected tokens and 0
    /// elsewhere in the forward pass.
    pub token_mask: Var,
    pub alpha: Var,
    pub phi: Var,
    pub relevance: ClauseRelevance,
}

#[derive(Clone, Debug)]
pub struct Cgip {
    pub attention: MultiHeadAttention,
    pub score: Linear,
    pub weight_mlp: Mlp,
    /// Learned key/value row appended to every observation.
    pub null: ParamId,
    pub dim: usize,
}

impl Cgip {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let attention = MultiHeadAttention::new(store, "cgip.attention", dim, heads, rng)?;
        attention.bias_towards_matching(store, MATCHING_BIAS);
        let score = Linear::new(store, "cgip.score", dim, 1, true, rng);
        store.value_mut(score.weight).fill(0.0);
        let weight_mlp = Mlp::new(store, "cgip.weight", dim, dim, 1, rng);
        let null = store.add("cgip.null", Tensor::zeros(1, dim));
        Ok(Self {
            attention,
            score,
            weight_mlp,
            null,
            dim,
        })
    }

    /// `U = CrossAttn(S_0, V_t)`, with the null row appended to `V_t` so a
    /// token without a match can attend to nothing in particular.
    pub fn cross_attend(&self, g: &mut Graph, s0: Var, obs: Var) -> Result<Var> {
        let null = g.param(self.null);
        let obs = g.concat_rows(&[obs, null])?;
        Ok(self.attention.forward(g, s0, obs)?.output)
    }

    /// `r = σ(U·W_r + b_r)` as an `L × 1` column.
    pub fn token_relevance(&self, g: &mut Graph, u: Var) -> Result<Var> {
        let z = self.score.forward(g, u)?;
        Ok(g.sigmoid(z))
    }

    /// Within-clause normalised token weights (`L × 1`).
    ///
    /// `membership` multiplies the unnormalised weights; it is one in the
    /// forward pass and carries the boundary scorer's gradient.
    pub fn clause_weights(
        &self,
        g: &mut Graph,
        u: Var,
        segs: &SegmentSet,
        membership: Var,
    ) -> Result<Var> {
        let logits = self.weight_mlp.forward(g, u)?;
        let logits = g.clamp(logits, -WEIGHT_LOGIT_CLAMP, WEIGHT_LOGIT_CLAMP);
        let raw = g.exp(logits);
        let raw = g.mul(raw, membership)?;
        normalize_within_clauses(g, raw, segs)
    }

    pub fn step(
        &self,
        g: &mut Graph,
        s0: Var,
        segs: &SegmentSet,
        membership: Var,
        obs: Var,
        mode: Mode,
    ) -> Result<CgipOutput> {
        let [len, _] = g.shape(s0);
        if segs.len != len {
            return Err(Error::Contract(format!(
                "segmentation covers {} tokens, state has {len}",
                segs.len
            )));
        }
        let u = self.cross_attend(g, s0, obs)?;
        let r = self.token_relevance(g, u)?;
        let w = self.clause_weights(g, u, segs, membership)?;
        let phi = clause_scores(g, r, w, segs)?;
        let routed = route(g, phi, mode)?;
        let members = g.constant(segs.membership_matrix());
        let sel_col = g.transpose(routed.selection);
        let mt = g.transpose(members);
        let token_mask = g.matmul(mt, sel_col)?;
        let relevance = ClauseRelevance {
            u: g.value(u).clone(),
            r: g.value(r).data().to_vec(),
            w: g.value(w).data().to_vec(),
            phi: g.value(phi).data().to_vec(),
            alpha: g.value(routed.alpha).data().to_vec(),
            k_star: routed.k_star,
        };
        Ok(CgipOutput {
            tokens: segs.tokens(routed.k_star),
            token_mask,
            alpha: routed.alpha,
            phi,
            relevance,
        })
    }
}

/// Divides each entry of an `L × 1` positive column by its clause total.
pub fn normalize_within_clauses(g: &mut Graph, raw: Var, segs: &SegmentSet) -> Result<Var> {
    let members = g.constant(segs.membership_matrix());
    let totals = g.matmul(members, raw)?;
    let mt = g.transpose(members);
    let per_token = g.matmul(mt, totals)?;
    g.div(raw, per_token)
}

/// `φ_k = Σ_{i ∈ T_k} w_i r_i` as a `1 × m` row.
pub fn clause_scores(g: &mut Graph, r: Var, w: Var, segs: &SegmentSet) -> Result<Var> {
    let members = g.constant(segs.membership_matrix());
    let wr = g.mul(w, r)?;
    let phi = g.matmul(members, wr)?;
    Ok(g.transpose(phi))
}
