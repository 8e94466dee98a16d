//! The Axial-MLP network.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{parameter_count, ModelConfig};
pub use model::{AxialBlock, AxialMlp, BoundParams, ForwardPass, Linear};
pub use crate::tensor::ops::soft_dice_loss;

/// Smoothing constant of the training loss.
pub const DICE_SMOOTH: f64 = 1.0;
