//! Minimal differentiable-tensor engine.
//!
//! Dense rank-4 tensors (N, C, H, W), a tape that records the handful of
//! primitives the segmentation networks need, reverse-mode gradients, and a
//! finite-difference gradient checker. Training storage is `f32`; every
//! kernel is generic over [`Scalar`] so the checker can run the exact same
//! graph in an `f64` shadow mode where finite differences are trustworthy.

mod gradcheck;
mod serial;
mod tape;
mod tensor;

pub mod ops;

pub use gradcheck::{grad_check, GradCheckSettings, GradReport};
pub use serial::{read_tensors, write_tensors, FORMAT_VERSION, MAGIC};
pub use tape::{Tape, Var};
pub use tensor::{ClassMask, Dims, Tensor};

use thiserror::Error;

/// Errors reported by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("invalid argument for {op}: {detail}")]
    InvalidArg { op: &'static str, detail: String },
    #[error("target class {class} out of range (num_classes {num_classes})")]
    BadTarget { class: u16, num_classes: usize },
    #[error("serialization format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NumError>;

/// Element type of the engine: `f32` for training, `f64` for shadow-mode
/// gradient checking.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
