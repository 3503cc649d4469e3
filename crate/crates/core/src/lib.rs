//! CNN-in-convolution image classifier.
//!
//! A small convolutional network is applied, with shared weights, to every
//! patch of a strided grid over the input image; the per-patch class logits
//! are averaged (global average pooling over patch positions and kernel
//! networks) and softmaxed for the final prediction. The crate contains the
//! full training stack — dense tensors, reverse-mode autodiff, orthonormal
//! initialization, Adam with learning-rate attenuation, dropout — plus the
//! diagnostic metrics used to analyze the ensemble (overfitting index and
//! the quadratic-loss ambiguity decomposition), with no external runtime
//! dependencies.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Whether stochastic layers (dropout) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
