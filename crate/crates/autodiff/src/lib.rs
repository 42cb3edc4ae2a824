//! Differentiable numeric substrate: dense row-major arrays over `f32`/`f64`,
//! a reverse-mode tape, temperature-softmax / cross-entropy kernels, and a
//! central finite-difference harness that gates every gradient in the
//! workspace.

pub mod gradcheck;
pub mod nd;
pub mod ops;
pub mod tape;

pub use gradcheck::{grad_check, grad_check_mixed, DiffLoss, GradCheckConfig, GradCheckReport, NamedParams};
pub use nd::{Dtype, NdArray, Scalar};
pub use ops::{cross_entropy, cross_entropy_with_floor, entropy, softmax_temp, LOG_FLOOR_EPS};
pub use tape::{Grads, Tape, Var};

/// Errors raised by array constructors, the exposed numeric ops, and the
/// gradient-check harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("loss function is not deterministic: repeated evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
