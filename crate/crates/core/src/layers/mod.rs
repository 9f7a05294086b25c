//! Forward and backward passes for every layer kind in the network.
//!
//! Each layer is a pair of free functions generic over the element type, so
//! the same code runs in `f32` for training and `f64` for gradient checks.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod pool;
pub mod reshape;

pub use activation::{dropout, dropout_backward, relu, relu_backward, DropoutMask};
pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, batchnorm_forward_infer, batchnorm_forward_train, update_running_stats,
    BatchNormCache, BatchNormGrads, BatchNormParams,
};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvParams};
pub use dense::{dense_backward, dense_forward, DenseGrads, DenseParams};
pub use pool::{maxpool_backward, maxpool_forward, ArgmaxMap, Padding, PoolGeometry};
pub use reshape::{concat_channels, flatten, split_channels, unflatten};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
