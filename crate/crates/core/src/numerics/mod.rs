//! Dense matrices, a reverse-mode tape, parameter storage and the
//! finite-difference oracle.

pub mod checkpoint;
mod gradcheck;
mod graph;
pub mod layers;
mod params;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_difference_check, GradCheckReport, DEFAULT_EPS};
pub use graph::{log_sum_exp, sigmoid, Gradients, Graph, Var};
pub use params::{Adam, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Temperature softmax over a plain slice.
pub fn softmax(xs: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Domain(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let mut out: Vec<f64> = xs.iter().map(|x| x / temperature).collect();
    graph::softmax_in_place(&mut out);
    Ok(out)
}

impl Graph<'_> {
    /// Softmax of every row of `x` at the given temperature.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(Error::Domain(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let scaled = if temperature == 1.0 {
            x
        } else {
            self.scale(x, 1.0 / temperature)
        };
        Ok(self.softmax_rows(scaled))
    }
}
