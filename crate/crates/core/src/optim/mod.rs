//! Adam, the step learning-rate schedule and the epoch-level training loop.

mod adam;
mod schedule;
mod train;

pub use adam::AdamState;
pub use schedule::TrainSchedule;
pub use train::{mean_dice, predict_batch, train, EpochRecord, TrainOutcome};
