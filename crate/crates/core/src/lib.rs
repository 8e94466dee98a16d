//! Axial-MLP volumetric segmentation.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and the tape-based reverse-mode differentiator.
//! - [`nn`]: the Axial-MLP model, its parameter accounting, loss and checkpoints.
//! - [`optim`]: Adam, the learning-rate schedule and the training loop.
//! - [`metrics`]: Dice, precision, recall, volume error rates and Pearson's r on soft masks.
//! - [`baselines`]: image-independent mean and optimized masks.
//! - [`data`]: volumes, NIfTI-1 I/O, synthetic phantoms, preprocessing, augmentation, splits.
//! - [`harness`]: cross-validation, fold ensembling, test evaluation and benchmarking.

pub mod baselines;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;

mod alloc;
pub use alloc::retain_freed_memory;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
