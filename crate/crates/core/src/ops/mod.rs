//! Differentiable operators recorded on a [`Tape`](crate::autodiff::Tape).

mod conv;
mod layout;
mod loss;
mod pointwise;
mod pool;
mod sample;

pub use conv::{conv2d, conv2d_stride2, conv3d_dvalid, transposed_conv2d};
pub use layout::{center_crop, center_depth_slice, concat_channels, reshape};
pub use loss::{bce_loss, BCE_EPS};
pub use pointwise::{activation, add, mul, relu, sigmoid, sum, weighted_sum, Activation};
pub use pool::max_pool;
pub use sample::bilinear_sample;
