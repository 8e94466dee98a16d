use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
///
/// The defaults reproduce the published parameter counts: a 102×94×76 crop
/// is downsampled to the largest multiple of the 8³ patch (96×88×72, grid
/// 12×11×9) and fed through six axial blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input volume extent in voxels.
    pub crop_shape: [usize; 3],
    /// Patch extent `(s_d, s_h, s_w)`.
    pub patch: [usize; 3],
    /// Input channels `c`.
    pub in_channels: usize,
    /// Hidden channels `f`.
    pub hidden: usize,
    /// Number of axial blocks `L`.
    pub depth: usize,
    pub leaky_slope: f64,
    pub dropout_rate: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            crop_shape: [102, 94, 76],
            patch: [8, 8, 8],
            in_channels: 1,
            hidden: 8,
            depth: 6,
            leaky_slope: 0.01,
            dropout_rate: 0.02,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    /// Patch grid `(N_d, N_h, N_w)`: how many whole patches fit in the crop.
    pub fn grid(&self) -> [usize; 3] {
        std::array::from_fn(|i| self.crop_shape[i] / self.patch[i].max(1))
    }

    /// Spatial extent the network operates on, `grid ⊙ patch`.
    pub fn working_shape(&self) -> [usize; 3] {
        let grid = self.grid();
        std::array::from_fn(|i| grid[i] * self.patch[i])
    }

    /// Lengths of the six mixing axes, in [`crate::tensor::Axis::ALL`] order.
    pub fn axis_lengths(&self) -> [usize; 6] {
        let g = self.grid();
        [g[0], g[1], g[2], self.patch[0], self.patch[1], self.patch[2]]
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch.contains(&0) {
            return Err(Error::param(format!("patch sizes must be ≥ 1, got {:?}", self.patch)));
        }
        if self.grid().contains(&0) {
            return Err(Error::param(format!(
                "crop {:?} is smaller than one {:?} patch",
                self.crop_shape, self.patch
            )));
        }
        if self.in_channels == 0 || self.hidden == 0 || self.depth == 0 {
            return Err(Error::param("in_channels, hidden and depth must all be ≥ 1"));
        }
        if !(self.leaky_slope >= 0.0) {
            return Err(Error::param("leaky_slope must be ≥ 0"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::param("dropout_rate must be in [0, 1)"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::param("norm_eps must be > 0"));
        }
        Ok(())
    }
}

/// Closed-form number of trainable scalars.
///
/// Each block holds six `(a·f)²` weights with `a·f` biases plus the two
/// normalization scalars; the channel embedding has `c·f + f` and the output
/// head `f + 1`.
pub fn parameter_count(config: &ModelConfig) -> usize {
    let f = config.hidden;
    let axes = config.axis_lengths();
    let sum_a: usize = axes.iter().sum();
    let sum_a2: usize = axes.iter().map(|a| a * a).sum();
    let block = f * f * sum_a2 + f * sum_a + 2;
    config.depth * block + config.in_channels * f + 2 * f + 1
}
