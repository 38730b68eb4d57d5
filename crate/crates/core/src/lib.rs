//! Unsupervised deformable image registration.
//!
//! A small convolutional network looks at a fixed/moving image pair and
//! regresses a coarse grid of B-spline control points; interpolating that
//! grid yields a dense displacement field, a differentiable bilinear
//! resampler warps the moving image with it, and the negative normalized
//! cross correlation between the warped and fixed images is the training
//! loss. Everything is plain f64 on the CPU with a hand-rolled reverse-mode
//! tape, so results are deterministic for a given seed.
//!
//! Layout:
//! - [`tensor`], [`ops`], [`tape`], [`optim`]: dense tensors, the numeric
//!   kernels, the gradient tape, and Adam.
//! - [`transformer`], [`resampler`]: B-spline control grids to displacement
//!   fields, and backward warping with bilinear interpolation.
//! - [`metrics`]: normalized cross correlation, Dice overlap, and surface
//!   distances.
//! - [`dirnet`]: the registration network itself.
//! - [`gradcheck`]: finite-difference verification of every gradient path.
//! - [`data_io`]: image, displacement-field, checkpoint, and dataset files.
//! - [`training`]: mini-batch training, an iterative per-pair baseline, and
//!   the evaluation harness.

pub mod data_io;
pub mod dirnet;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod resampler;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::Tensor;
