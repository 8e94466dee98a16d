//! Image-independent baselines: the voxelwise mean of the training masks and
//! a constant mask optimized for total Dice over the training set.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_volume, write_volume, DataType, MaskVolume};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::rng::hash_str;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Mean,
    Optimized,
}

/// The same soft mask predicted for every input.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantMask {
    pub values: MaskVolume,
    pub provenance: Provenance,
    /// Content fingerprint of the training masks it was derived from.
    pub training_set: String,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    provenance: Provenance,
    training_set: String,
}

impl ConstantMask {
    /// Writes `<stem>.nii` (float64) and `<stem>.json` with the provenance.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        write_volume(stem.with_extension("nii"), self.values.volume(), DataType::Float64)?;
        let json = serde_json::to_string_pretty(&Sidecar {
            provenance: self.provenance,
            training_set: self.training_set.clone(),
        })?;
        let path = stem.with_extension("json");
        fs::write(&path, json).map_err(|e| Error::file(path, e))
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let values = MaskVolume::new(read_volume(stem.with_extension("nii"))?)?;
        let path = stem.with_extension("json");
        let text = fs::read_to_string(&path).map_err(|e| Error::file(path, e))?;
        let meta: Sidecar = serde_json::from_str(&text)?;
        Ok(ConstantMask {
            values,
            provenance: meta.provenance,
            training_set: meta.training_set,
        })
    }
}

fn fingerprint(masks: &[MaskVolume]) -> String {
    let mut h = hash_str("masks");
    for m in masks {
        for &v in m.data() {
            h = (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01B3);
        }
        h = (h ^ m.data().len() as u64).wrapping_mul(0x0000_0100_0000_01B3);
    }
    format!("{}x{:016x}", masks.len(), h)
}

fn check_set(masks: &[MaskVolume]) -> Result<()> {
    let first = masks
        .first()
        .ok_or_else(|| Error::param("baselines need at least one training mask"))?;
    if let Some(m) = masks.iter().find(|m| m.shape() != first.shape()) {
        return Err(Error::Dimension(format!(
            "training masks differ in shape: {:?} vs {:?}",
            first.shape(),
            m.shape()
        )));
    }
    Ok(())
}

/// Voxelwise arithmetic mean of the training masks.
pub fn mean_mask(masks: &[MaskVolume]) -> Result<ConstantMask> {
    check_set(masks)?;
    let n = masks.len() as f64;
    let mut acc = vec![0.0; masks[0].data().len()];
    for m in masks {
        for (a, v) in acc.iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a = (*a / n).clamp(0.0, 1.0));
    Ok(ConstantMask {
        values: MaskVolume::new(masks[0].volume().with_data(acc)?)?,
        provenance: Provenance::Mean,
        training_set: fingerprint(masks),
    })
}

/// `Σ_y Dice(x, y)` over the set; terms with an empty denominator count 0.
pub fn total_dice(x: &[f64], masks: &[MaskVolume]) -> f64 {
    let sx: f64 = x.iter().sum();
    masks
        .iter()
        .map(|m| {
            let (mut inter, mut sy) = (0.0, 0.0);
            for (a, b) in x.iter().zip(m.data()) {
                inter += a * b;
                sy += b;
            }
            if sx + sy > 0.0 {
                2.0 * inter / (sx + sy)
            } else {
                0.0
            }
        })
        .sum()
}

/// Gradient of [`total_dice`] with respect to `x`:
/// `∂D/∂xᵢ = 2yᵢ/S − 2I/S²` with `I = Σxy`, `S = Σx + Σy`.
fn total_dice_grad(x: &[f64], masks: &[MaskVolume]) -> Vec<f64> {
    let sx: f64 = x.iter().sum();
    let mut g = vec![0.0; x.len()];
    for m in masks {
        let (mut inter, mut sy) = (0.0, 0.0);
        for (a, b) in x.iter().zip(m.data()) {
            inter += a * b;
            sy += b;
        }
        let s = sx + sy;
        if s == 0.0 {
            continue;
        }
        let c = 2.0 * inter / (s * s);
        for (gi, yi) in g.iter_mut().zip(m.data()) {
            *gi += 2.0 * yi / s - c;
        }
    }
    g
}

/// Adam ascent on the total Dice from the mean mask, clamping to `[0, 1]`
/// after every step. Returns the mask and the objective before each step
/// plus after the last one.
pub fn optimize_mask(masks: &[MaskVolume], steps: usize, lr: f64) -> Result<(ConstantMask, Vec<f64>)> {
    let start = mean_mask(masks)?;
    let mut x = Tensor::new([start.values.data().len()], start.values.data().to_vec())?;
    let mut adam = AdamState::new();
    let mut trace = vec![total_dice(x.data(), masks)];
    let names = ["mask".to_string()];
    for _ in 0..steps {
        let g = total_dice_grad(x.data(), masks);
        x.zero_grad();
        // descend on the negated objective
        x.accumulate_grad(&g.iter().map(|v| -v).collect::<Vec<_>>())?;
        adam.step(&mut [&mut x], &names, lr)?;
        x.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        trace.push(total_dice(x.data(), masks));
    }
    let values = MaskVolume::new(start.values.volume().with_data(x.into_data())?)?;
    Ok((
        ConstantMask {
            values,
            provenance: Provenance::Optimized,
            training_set: start.training_set,
        },
        trace,
    ))
}

/// The optimized constant mask (default: 100 steps at learning rate 1).
pub fn optimized_mask(masks: &[MaskVolume], steps: usize, lr: f64) -> Result<ConstantMask> {
    Ok(optimize_mask(masks, steps, lr)?.0)
}
