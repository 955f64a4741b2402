//! Core of a desk-scale benchmark harness for binary segmentation models.
//!
//! Everything here is allocation-only (`no_std` + `alloc`): slice preprocessing,
//! paired augmentation, a small tape-based autodiff over 4D tensors, the four
//! encoder-decoder architectures, Soft Dice training with Adam, hard metrics and
//! the numeric side of reporting. File formats, the parallel matrix runner and
//! the command line live in the `segbench` crate.

#![no_std]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops read better than zipped iterators in the kernels.
#![allow(clippy::needless_range_loop)]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod augment;
pub mod dataio;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod real;
pub mod report;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use grid::Grid;
pub use real::Real;
pub use rng::RngStream;
