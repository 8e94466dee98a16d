use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{AdamState, TrainSchedule};
use crate::data::{augment_random, stack, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{soft_dice_loss, AxialMlp, Checkpoint, CheckpointMeta, DICE_SMOOTH};
use crate::rng::{self, hash_str};
use crate::tensor::{Mode, Tape, Tensor};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean soft-Dice loss over the epoch's batches.
    pub train_loss: f64,
    /// Mean soft Dice on the validation set, eval mode.
    pub val_dice: f64,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!(
            "epoch {:>4}  lr {:.1e}  train_loss {:.6}  val_dice {:.6}",
            self.epoch, self.lr, self.train_loss, self.val_dice
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the highest validation Dice.
    pub best: Checkpoint,
    /// Weights after the last epoch.
    pub last: AxialMlp,
    pub history: Vec<EpochRecord>,
}

/// Mean soft Dice of eval-mode predictions, evaluated `batch` samples at a time.
pub fn mean_dice(model: &AxialMlp, samples: &[Sample], batch: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::param("cannot score an empty sample set"));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(batch.max(1)) {
        for (pred, s) in predict_batch(model, chunk)?.into_iter().zip(chunk) {
            total += metrics::dice(&pred, s.mask.data())?;
        }
    }
    Ok(total / samples.len() as f64)
}

/// Eval-mode soft predictions, one flat vector per sample.
pub fn predict_batch(model: &AxialMlp, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    let x = stack(samples.iter().map(|s| &s.image))?;
    let out = model.predict(&x)?;
    let n = out.len() / samples.len();
    Ok(out.data().chunks(n).map(<[f64]>::to_vec).collect())
}

fn batch_tensors(model_in: &[Sample], augment: &AugmentConfig, seed: u64, epoch: usize, idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let mut images = Vec::with_capacity(idx.len());
    let mut masks = Vec::with_capacity(idx.len());
    for &i in idx {
        let s = &model_in[i];
        let mut r = rng::child(seed, &[hash_str("augment"), epoch as u64, i as u64]);
        let (img, msk) = augment_random(&s.image, &s.mask, augment, &mut r)?;
        images.push(img);
        masks.push(msk.into_volume());
    }
    Ok((stack(&images)?, stack(&masks)?))
}

/// Trains `model` with Adam under `schedule`, selecting the epoch with the
/// best mean validation Dice (ties keep the earlier epoch).
///
/// Every random draw is keyed by `seed`: the batch order by epoch, the
/// augmentation by (epoch, sample index) and dropout by (epoch, batch index).
/// `on_epoch` sees each record as soon as it is complete.
pub fn train(
    mut model: AxialMlp,
    train_set: &[Sample],
    val_set: &[Sample],
    schedule: &TrainSchedule,
    augment: &AugmentConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    schedule.validate()?;
    augment.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::param("training and validation sets must be nonempty"));
    }
    let mut adam = AdamState::new();
    let mut history = Vec::with_capacity(schedule.epochs);
    let mut best: Option<(f64, usize, AxialMlp)> = None;

    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch)?;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::child(seed, &[hash_str("shuffle"), epoch as u64]));

        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(schedule.batch_size).enumerate() {
            let (x, y) = batch_tensors(train_set, augment, seed, epoch, idx)?;
            let mut dropout = rng::child(seed, &[hash_str("dropout"), epoch as u64, b as u64]);
            let tape = Tape::new();
            let pass = model.forward(&tape, &x, Mode::Train(&mut dropout), true)?;
            let loss = soft_dice_loss(&pass.output, &y, DICE_SMOOTH)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss is {value} at epoch {epoch}, batch {b}"
                )));
            }
            tape.backward(&loss)?;
            model.zero_grad();
            model.accumulate_grads(&tape, &pass.params)?;
            drop(pass);
            adam.step_model(&mut model, lr)?;
            loss_sum += value * idx.len() as f64;
        }

        let val_dice = mean_dice(&model, val_set, schedule.batch_size)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            val_dice,
        };
        on_epoch(&record);
        history.push(record);
        if best.as_ref().map_or(true, |(d, _, _)| val_dice > *d) {
            let mut snapshot = model.clone();
            snapshot.clear_grads();
            best = Some((val_dice, epoch, snapshot));
        }
    }

    let (val_dice, epoch, best_model) = best.expect("at least one epoch ran");
    model.clear_grads();
    Ok(TrainOutcome {
        best: Checkpoint::new(
            best_model,
            CheckpointMeta {
                epoch: Some(epoch),
                val_dice: Some(val_dice),
                fold: None,
            },
        ),
        last: model,
        history,
    })
}
