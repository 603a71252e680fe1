//! Globally guided progressive fusion network (GGPFN) for volumetric
//! segmentation, built on a small tensor and reverse-mode autodiff core.

// `!(x >= 0.0)` is used on purpose to reject NaN along with negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod model;
pub mod ops;
pub mod patch;
pub mod tensor;
pub mod train;
pub mod volume;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
