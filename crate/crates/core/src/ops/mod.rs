//! Forward and backward kernels for the operation set the network uses.

mod activation;
mod batch_norm;
mod conv;
mod elementwise;
mod resize;
mod softmax;

pub use activation::{relu6, relu6_backward};
pub use batch_norm::{
    batch_norm, batch_norm_backward, batch_norm_eval, batch_norm_train, BatchNormCache, BatchNormGrads,
    BatchNormParams,
};
pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvParams};
pub use elementwise::{add, concat_channels, ewise, mul, mul_backward, scale, split_channels, EwiseOp};
pub use resize::{bilinear_resize, bilinear_resize_backward};
pub use softmax::{channel_softmax, channel_softmax_backward};
