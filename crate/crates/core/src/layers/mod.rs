//! Layers with hand-written backward passes.

mod activation;
mod batchnorm;
mod conv;
mod dense;
mod init;
mod loss;

pub use activation::{relu_backward, relu_forward, selu_backward, selu_forward, Activation, SeluParams};
pub use batchnorm::{BatchNorm, BnGrads, DEFAULT_EPSILON};
pub use conv::{Conv2d, ConvGrads};
pub use dense::{Dense, DenseGrads};
pub use init::{init_weights, init_weights_seeded, InitScheme};
pub use loss::{argmax_rows, softmax_xent};
