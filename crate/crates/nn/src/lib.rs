//! A small CPU tensor engine for sequential convolutional networks.
//!
//! Everything is NCHW and 4-D: fully connected activations are carried as
//! `[batch, features, 1, 1]`. Layers expose an inference forward, a recording
//! forward that keeps what backward needs, and a backward that either
//! accumulates parameter gradients (`&mut self`) or only propagates the input
//! gradient (`&self`, used for frozen networks).
//!
//! All kernels are single threaded and evaluate in a fixed order, so results
//! are bit-reproducible for a given build.

pub mod gemm;
pub mod init;
pub mod layer;
pub mod optim;
pub mod param;
pub mod sequential;
pub mod tensor;

pub use layer::{Conv2d, Layer, LayerCache, Linear, NormMode, Residual};
pub use optim::{Adam, AdamConfig};
pub use param::Param;
pub use sequential::{Sequential, SequentialCache};
pub use tensor::{Shape, Tensor};

/// Floating point type used by every kernel.
#[cfg(not(feature = "f64"))]
pub type Scalar = f32;
/// Floating point type used by every kernel.
#[cfg(feature = "f64")]
pub type Scalar = f64;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{name}` has {got} values, expected {expected}")]
    ParamLength {
        name: String,
        expected: usize,
        got: usize,
    },
}

pub type Result<T> = std::result::Result<T, NnError>;
