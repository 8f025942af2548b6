//! Deep convolutional and fully connected acoustic-model stacks with
//! switchable shortcuts, batchnorm and activation, trained with plain SGD and
//! scored through a frame-skipping, lazily evaluated two-thread pipeline.

pub mod error;
pub mod harness;
pub mod layers;
pub mod model;
pub mod runtime;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
