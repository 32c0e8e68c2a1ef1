//! Parameterised building blocks shared by the encoder, the picker and the
//! refiner.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `y = x·W (+ b)` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(in_dim, out_dim, xavier(in_dim, out_dim), rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(1, out_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Two-layer perceptron with a tanh hidden layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), in_dim, hidden_dim, true, rng),
            output: Linear::new(store, &format!("{name}.1"), hidden_dim, out_dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.tanh(h);
        self.output.forward(g, h)
    }
}

/// Row-wise layer normalisation with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(1, dim)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.layer_norm_rows(x, LAYER_NORM_EPS);
        let gain = g.param(self.gain);
        let shift = g.param(self.shift);
        let y = g.mul_row(n, gain)?;
        g.add_row(y, shift)
    }
}

/// Multi-head scaled dot-product attention; queries come from one matrix,
/// keys and values from another.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Attention output plus the per-head weight matrices (`queries × keys`).
#[derive(Clone, Debug)]
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "hidden size {dim} is not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, false, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, false, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, false, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, false, rng),
            heads,
            dim,
        })
    }

    /// Adds `scale · I` to the query and key projections, so that at
    /// initialisation each query favours keys resembling itself.
    pub fn bias_towards_matching(&self, store: &mut ParamStore, scale: f64) {
        for p in [self.query.weight, self.key.weight] {
            let w = store.value_mut(p);
            for i in 0..self.dim {
                w.set(i, i, w.get(i, i) + scale);
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, keys_values: Var) -> Result<Attended> {
        let [_, qd] = g.shape(queries);
        let [_, kd] = g.shape(keys_values);
        if qd != self.dim || kd != self.dim {
            return Err(Error::Dimension {
                op: "attention",
                lhs: g.shape(queries),
                rhs: g.shape(keys_values),
            });
        }
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, keys_values)?;
        let v = self.value.forward(g, keys_values)?;
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (s, e) = (h * head_dim, (h + 1) * head_dim);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, s, e)?, g.slice_cols(k, s, e)?, g.slice_cols(v, s, e)?)
            };
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outputs.push(g.matmul(attn, vh)?);
            weights.push(attn);
        }
        let merged = if outputs.len() == 1 {
            outputs[0]
        } else {
            g.concat_cols(&outputs)?
        };
        let output = self.out.forward(g, merged)?;
        Ok(Attended { output, weights })
    }
}

/// Post-norm self-attention block followed by a position-wise feed-forward
/// layer.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            ffn: Mlp::new(store, &format!("{name}.ffn"), dim, 2 * dim, dim, rng),
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Attended> {
        let att = self.attention.forward(g, x, x)?;
        let a = g.add(x, att.output)?;
        let h = self.norm1.forward(g, a)?;
        let f = self.ffn.forward(g, h)?;
        let f = g.add(h, f)?;
        let output = self.norm2.forward(g, f)?;
        Ok(Attended {
            output,
            weights: att.weights,
        })
    }
}

/// Sinusoidal position table for positions `offset..offset+len`.
pub fn sinusoidal_positions(len: usize, dim: usize, offset: usize) -> Tensor {
    let mut t = Tensor::zeros(len, dim);
    for p in 0..len {
        let pos = (p + offset) as f64;
        for i in 0..dim {
            let freq = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos / freq;
            t.set(p, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}
