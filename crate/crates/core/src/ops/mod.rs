//! Forward and backward kernels on plain tensors.

pub mod activation;
pub mod conv;
pub mod loss;
pub mod norm;
pub mod pool;

pub use activation::{argmax_channels, relu, softmax_channels};
pub use conv::{conv2d_forward, ConvGeometry};
pub use loss::{cross_entropy_per_sample, cross_entropy_soft, one_hot, LOG_EPS};
pub use norm::{batch_norm_forward, BatchNormState, BnMode, BnUpdate, StatsAccumulator};
pub use pool::{concat_channels, max_pool2, upsample2};
