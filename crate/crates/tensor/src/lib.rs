//! Minimal dense-tensor library with reverse-mode automatic differentiation.
//!
//! Everything is row-major `f32`. A [`Tape`] records primitive operations as
//! they are applied and replays them in reverse on [`Tape::backward`]. The
//! primitive set is deliberately small: exactly what a pre-norm Transformer
//! needs, plus a fused multi-head attention over packed, variable-length
//! segments so that batches never carry padding.

mod error;
pub mod kernels;
mod optim;
mod tape;
mod tensor;

pub use error::TensorError;
pub use optim::{inverse_sqrt_lr, Adam, AdamConfig};
pub use tape::{AttnSegment, Tape, Var};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, TensorError>;

/// Additive logit applied to blocked attention positions before normalization.
pub const BLOCKED_LOGIT: f32 = -1e9;
