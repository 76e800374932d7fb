//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! Only the handful of ops the model needs are provided. Broadcasting is
//! limited to the "trailing dims" form used for biases, per-head vectors
//! and fixed attention masks.

mod gradcheck;
mod kernels;
mod ops;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_FLOOR};
pub use ops::{sigmoid, DEFAULT_LEAKY_SLOPE};
pub use params::{ParamEntry, ParamStore};
pub use tape::{Gradients, ParamId, Tape, Var};
pub use tensor::Tensor;
