//! Instruction-as-state navigation.
//!
//! An instruction is kept as a token-level state matrix that is updated at
//! every navigation step: a coarse stage picks the clause that is grounded in
//! the current observation, and a fine stage refines that clause's tokens and
//! folds them back through a gated residual update.

pub mod cgip;
pub mod encoder;
pub mod engine;
pub mod envsim;
pub mod error;
pub mod eval;
pub mod fgip;
pub mod numerics;
pub mod rollout;
pub mod segmenter;
pub mod trainer;

pub use error::{Error, Result};
