use serde::{Deserialize, Serialize};

use super::volume::{MaskVolume, Volume};
use crate::error::{Error, Result};

/// Default margin around the union bounding box, in voxels.
pub const CROP_MARGIN: usize = 10;

/// Rescales to zero mean and unit (population) standard deviation.
pub fn z_normalize(v: &Volume) -> Result<Volume> {
    let n = v.len() as f64;
    let mean = v.data().iter().sum::<f64>() / n;
    let var = v.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::Undefined(
            "z-normalization of a constant image".into(),
        ));
    }
    v.with_data(v.data().iter().map(|x| (x - mean) / sd).collect())
}

/// Inclusive voxel box `[start, end]` on a grid of shape `grid`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub grid: [usize; 3],
    pub start: [usize; 3],
    pub end: [usize; 3],
}

impl CropBox {
    pub fn shape(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.end[a] - self.start[a] + 1)
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.start[a] <= p[a] && p[a] <= self.end[a])
    }

    /// Box of exactly `shape` centred on this one, shifted to stay on the grid.
    pub fn resized(&self, shape: [usize; 3]) -> Result<CropBox> {
        let mut out = *self;
        for a in 0..3 {
            if shape[a] == 0 || shape[a] > self.grid[a] {
                return Err(Error::dim(format!(
                    "crop extent {} on axis {a} does not fit a grid of {}",
                    shape[a], self.grid[a]
                )));
            }
            let current = self.end[a] - self.start[a] + 1;
            let grow = shape[a] as isize - current as isize;
            let lo = (self.start[a] as isize - grow.div_euclid(2))
                .clamp(0, (self.grid[a] - shape[a]) as isize) as usize;
            out.start[a] = lo;
            out.end[a] = lo + shape[a] - 1;
        }
        Ok(out)
    }
}

/// Union bounding box of all nonzero voxels, expanded by `margin` and clamped.
pub fn crop_bbox<'a>(masks: impl IntoIterator<Item = &'a MaskVolume>, margin: usize) -> Result<CropBox> {
    let mut grid = None;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for m in masks {
        let shape = m.shape();
        match grid {
            None => grid = Some(shape),
            Some(g) if g != shape => {
                return Err(Error::dim(format!("masks on different grids: {g:?} vs {shape:?}")))
            }
            _ => {}
        }
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                for k in 0..shape[2] {
                    if m.volume().get(i, j, k) != 0.0 {
                        any = true;
                        for (a, p) in [i, j, k].into_iter().enumerate() {
                            lo[a] = lo[a].min(p);
                            hi[a] = hi[a].max(p);
                        }
                    }
                }
            }
        }
    }
    let grid = grid.ok_or_else(|| Error::param("no masks given for the bounding box"))?;
    if !any {
        return Err(Error::param("all masks are empty; the bounding box is undefined"));
    }
    Ok(CropBox {
        grid,
        start: lo.map(|l| l.saturating_sub(margin)),
        end: [0, 1, 2].map(|a| (hi[a] + margin).min(grid[a] - 1)),
    })
}

/// Extracts the box from `v`.
pub fn apply_crop(v: &Volume, crop: &CropBox) -> Result<Volume> {
    if v.shape() != crop.grid {
        return Err(Error::dim(format!(
            "crop box was computed on a {:?} grid, volume is {:?}",
            crop.grid,
            v.shape()
        )));
    }
    let [d, h, w] = crop.shape();
    let mut data = Vec::with_capacity(d * h * w);
    for i in crop.start[0]..=crop.end[0] {
        for j in crop.start[1]..=crop.end[1] {
            let row = v.index(i, j, crop.start[2]);
            data.extend_from_slice(&v.data()[row..row + w]);
        }
    }
    Volume::new([d, h, w], data)?.with_voxel_size(v.voxel_size())
}

pub fn apply_crop_mask(m: &MaskVolume, crop: &CropBox) -> Result<MaskVolume> {
    MaskVolume::new(apply_crop(m.volume(), crop)?)
}

/// Inverse of [`apply_crop`]: places `v` at the box on a zero-filled grid.
pub fn paste_crop(v: &Volume, crop: &CropBox) -> Result<Volume> {
    if v.shape() != crop.shape() {
        return Err(Error::dim(format!(
            "volume {:?} does not match crop box {:?}",
            v.shape(),
            crop.shape()
        )));
    }
    let mut out = Volume::zeros(crop.grid)?.with_voxel_size(v.voxel_size())?;
    let w = v.shape()[2];
    let mut rows = v.data().chunks_exact(w);
    for i in crop.start[0]..=crop.end[0] {
        for j in crop.start[1]..=crop.end[1] {
            let at = out.index(i, j, crop.start[2]);
            out.data_mut()[at..at + w].copy_from_slice(rows.next().expect("row count matches the box"));
        }
    }
    Ok(out)
}
