//! Grounded language-model training: a small autodiff engine, a causal
//! transformer with per-layer taps, the token-level cross-modal contrastive
//! objective and its baselines, mixed grounded/ungrounded training, and a
//! word-learning evaluation harness.

pub mod data;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod train;

pub use tensor::{Tape, Tensor, TensorError, Var};
