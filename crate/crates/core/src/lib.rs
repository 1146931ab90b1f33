//! Building blocks for training small convolutional networks under a
//! multi-stage feature decorrelation penalty.
//!
//! - [`tensor`] and [`autodiff`]: dense arrays and a reverse-mode tape.
//! - [`decorrelation`]: channel correlation matrices, the decorrelation
//!   penalty, softmax cross-entropy and the joint objective.
//! - [`model`]: declarative staged CNNs with activation taps and checkpoints.
//! - [`data`]: IDX / CIFAR-10 loaders, a synthetic dataset and batching.
//! - [`train`]: SGD with momentum, learning-rate schedule, metrics.

pub mod autodiff;
pub mod data;
pub mod decorrelation;
pub mod error;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;
