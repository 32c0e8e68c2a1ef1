//! Instruction refiner: re-grounds the active clause under the observation,
//! re-encodes it and folds it back into the state through an element-wise
//! gated residual update.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::layers::{
    sinusoidal_positions, Mlp, MultiHeadAttention, TransformerBlock, LAYER_NORM_EPS,
};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Bound on the gate pre-activation; keeps `g` strictly inside `(0, 1)`.
pub const GATE_LOGIT_CLAMP: f64 = 30.0;
pub const GATE_BIAS_INIT: f64 = -2.0;

#[derive(Clone, Debug)]
pub struct Fgip {
    pub attention: MultiHeadAttention,
    pub block: TransformerBlock,
    pub gate: Mlp,
    pub dim: usize,
    /// Adds segment-relative sinusoidal positions before the block.
    pub positions: bool,
}

/// Graph handles of one refiner step.
#[derive(Clone, Debug)]
pub struct FgipOutput {
    pub t_tilde: Var,
    pub r_hat: Var,
    /// Full `L × d` scatter result.
    pub r: Var,
    /// Gate `L × d`.
    pub gate: Var,
    pub state: Var,
}

impl Fgip {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let attention = MultiHeadAttention::new(store, "fgip.attention", dim, heads, rng)?;
        attention.bias_towards_matching(store, crate::cgip::MATCHING_BIAS);
        let block = TransformerBlock::new(store, "fgip.block", dim, heads, rng)?;
        let gate = Mlp::new(store, "fgip.gate", 2 * dim, dim, dim, rng);
        store
            .value_mut(gate.output.bias.expect("gate bias"))
            .fill(GATE_BIAS_INIT);
        Ok(Self {
            attention,
            block,
            gate,
            dim,
            positions: true,
        })
    }

    /// `T̃ = CrossAttn(S_prev[T_sel], V_t)`.
    pub fn ground_tokens(&self, g: &mut Graph, s_prev: Var, tokens: &[usize], obs: Var) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Contract("no tokens selected for refinement".into()));
        }
        let q = g.gather_rows(s_prev, tokens)?;
        Ok(self.attention.forward(g, q, obs)?.output)
    }

    /// One self-attention block over the selected tokens only.
    pub fn contextual_encode(&self, g: &mut Graph, t_tilde: Var) -> Result<Var> {
        let x = if self.positions {
            let [n, d] = g.shape(t_tilde);
            let pos = g.constant(sinusoidal_positions(n, d, 0));
            g.add(t_tilde, pos)?
        } else {
            t_tilde
        };
        Ok(self.block.forward(g, x)?.output)
    }

    /// `g = σ(MLP_g([LN(S_prev); LN(R)]))`.
    pub fn gate(&self, g: &mut Graph, s_prev: Var, r: Var) -> Result<Var> {
        let a = g.layer_norm_rows(s_prev, LAYER_NORM_EPS);
        let b = g.layer_norm_rows(r, LAYER_NORM_EPS);
        let x = g.concat_cols(&[a, b])?;
        let z = self.gate.forward(g, x)?;
        let z = g.clamp(z, -GATE_LOGIT_CLAMP, GATE_LOGIT_CLAMP);
        Ok(g.sigmoid(z))
    }

    /// `S_t = S_prev + g ⊙ (R - S_prev)`, with the gate rows further scaled
    /// by `token_mask` when one is given (see [`crate::cgip::CgipOutput`]).
    pub fn step(
        &self,
        g: &mut Graph,
        s_prev: Var,
        tokens: &[usize],
        token_mask: Option<Var>,
        obs: Var,
    ) -> Result<FgipOutput> {
        let t_tilde = self.ground_tokens(g, s_prev, tokens, obs)?;
        let r_hat = self.contextual_encode(g, t_tilde)?;
        let r = scatter(g, r_hat, tokens, s_prev)?;
        let gate = self.gate(g, s_prev, r)?;
        let effective = match token_mask {
            Some(m) => g.mul_col(gate, m)?,
            None => gate,
        };
        let state = gated_fuse(g, s_prev, r, effective)?;
        Ok(FgipOutput {
            t_tilde,
            r_hat,
            r,
            gate,
            state,
        })
    }
}

/// Writes `r_hat` rows at `tokens`; every other row is `s_prev`'s.
pub fn scatter(g: &mut Graph, r_hat: Var, tokens: &[usize], s_prev: Var) -> Result<Var> {
    g.scatter_rows(s_prev, r_hat, tokens)
}

pub fn gated_fuse(g: &mut Graph, s_prev: Var, r: Var, gate: Var) -> Result<Var> {
    let diff = g.sub(r, s_prev)?;
    let step = g.mul(gate, diff)?;
    g.add(s_prev, step)
}

/// Mean of the gate over the given token rows.
pub fn gate_mean(gate: &Tensor, tokens: &[usize]) -> f64 {
    let n = (tokens.len() * gate.cols()) as f64;
    tokens.iter().map(|&i| gate.row(i).iter().sum::<f64>()).sum::<f64>() / n
}
