//! Dual-path attention-guided crowd counting.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`kernels`] and [`autodiff`]: dense tensors and a
//!   reverse-mode tape with the layers the network needs.
//! * [`model`] and [`checkpoint`]: the VGG-style feature extractor with
//!   density and attention decoders, and its binary checkpoint format.
//! * [`groundtruth`]: density and attention targets rasterized from head
//!   points.
//! * [`data`]: image and annotation IO, augmentation and batching.
//! * [`training`]: losses, Adam and the training loop.
//! * [`eval`]: counting metrics and map export.

// Positivity checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod groundtruth;
pub mod imaging;
pub mod kernels;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod training;

pub use autodiff::{Graph, Mode, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
