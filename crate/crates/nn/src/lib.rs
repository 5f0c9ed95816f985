//! Reverse-mode automatic differentiation over dense `f32`/`f64` tensors.
//!
//! The engine is deliberately narrow: it covers exactly the layers a small
//! convolutional encoder-decoder needs (2-D convolution, ReLU, 2×2 max
//! pooling, nearest-neighbour upsampling, channel concatenation, group
//! normalisation and pixel-wise cross-entropy) plus the Adam optimizer and a
//! reduce-on-plateau learning-rate schedule.
//!
//! Every computation is recorded on a [`Graph`] tape. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of
//! a scalar output with respect to every node that requires one.
//!
//! All kernels are single-threaded and reduce in a fixed order, so a given
//! sequence of operations produces bit-identical results across runs.

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod scalar;
mod schedule;
mod tensor;

pub use error::{NnError, Result};
pub use graph::{Conv2dSpec, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use scalar::Scalar;
pub use schedule::{PlateauConfig, PlateauSchedule};
pub use tensor::Tensor;
