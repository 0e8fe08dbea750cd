//! Min-block networks: a compact CPU deep-learning stack built around the
//! minimum of two learned depthwise filter responses.
//!
//! The crate covers the pieces needed to build, train and stress-test such
//! networks end to end:
//!
//! - [`autodiff`]: a reverse-mode tape over [`Tensor`] values, with
//!   finite-difference checks in [`gradcheck`].
//! - [`nn`] and [`blocks`]: parameter stores, initialization, Min-blocks,
//!   PyramidNet basic blocks and DenseNet-BC bottlenecks.
//! - [`model`]: ResNet / DenseNet assembly with the Min-block substitution rule.
//! - [`train`]: SGD with momentum, step schedules and Cifar-style augmentation.
//! - [`data`]: Cifar-10 binary batches and synthetic stand-ins.
//! - [`jpeg`]: a baseline JFIF codec used to build compressed test sets.
//! - [`eval`]: changed-prediction rates under compression and the
//!   hyperselectivity probe.
//! - [`checkpoint`] and [`config`]: on-disk formats used by the CLI.

pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod jpeg;
mod kernels;
pub mod model;
pub mod nn;
pub mod rng;
mod scalar;
mod tensor;
pub mod train;

pub use autodiff::{BatchNormMode, BatchStats, Gradients, Tape, Var};
pub use error::TensorError;
pub use scalar::Scalar;
pub use tensor::Tensor;
