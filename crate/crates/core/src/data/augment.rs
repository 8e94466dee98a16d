//! Random affine augmentation of image/mask pairs.
//!
//! The output voxel `q` takes the input value at `T⁻¹(q)` where
//! `T(p) = s·R·(p − c) + c + t`, `c` is the volume centre and
//! `R = Rz·Ry·Rx` (rotation about axis 0 applied first).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::volume::{MaskVolume, Volume};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Sampling ranges for the affine parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub scale: [f64; 2],
    pub rotation_deg: [f64; 2],
    /// Voxels, per axis.
    pub translation: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            scale: [0.9, 1.2],
            rotation_deg: [-10.0, 10.0],
            translation: [-5.0, 5.0],
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("scale", self.scale),
            ("rotation", self.rotation_deg),
            ("translation", self.translation),
        ] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::param(format!("{name} range [{lo}, {hi}] is invalid")));
            }
        }
        if !(self.scale[0] > 0.0) {
            return Err(Error::param("scale factors must be positive"));
        }
        Ok(())
    }

    /// Draws one parameter set; identity when disabled.
    pub fn sample(&self, rng: &mut Rng) -> AffineParams {
        if !self.enabled {
            return AffineParams::identity();
        }
        let mut draw = |[lo, hi]: [f64; 2]| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        AffineParams {
            scale: draw(self.scale),
            rotation_deg: [(); 3].map(|_| draw(self.rotation_deg)),
            translation: [(); 3].map(|_| draw(self.translation)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub scale: f64,
    pub rotation_deg: [f64; 3],
    pub translation: [f64; 3],
}

impl AffineParams {
    pub fn identity() -> Self {
        AffineParams {
            scale: 1.0,
            rotation_deg: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    fn rotation(&self) -> [[f64; 3]; 3] {
        let [ax, ay, az] = self.rotation_deg.map(f64::to_radians);
        let (sx, cx) = ax.sin_cos();
        let (sy, cy) = ay.sin_cos();
        let (sz, cz) = az.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        matmul(rz, matmul(ry, rx))
    }
}

fn matmul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Warps the pair: trilinear for the image (outside filled with the image
/// minimum), nearest neighbour for the mask (outside filled with 0).
pub fn augment_affine(v: &Volume, m: &MaskVolume, params: &AffineParams) -> Result<(Volume, MaskVolume)> {
    if v.shape() != m.shape() {
        return Err(Error::dim(format!(
            "image {:?} and mask {:?} differ in shape",
            v.shape(),
            m.shape()
        )));
    }
    if !(params.scale > 0.0) {
        return Err(Error::param(format!("scale must be positive, got {}", params.scale)));
    }
    let shape = v.shape();
    let center = shape.map(|n| (n as f64 - 1.0) / 2.0);
    let r = params.rotation();
    let fill = v.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let n = v.len();
    let mut image = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let d = [
                    i as f64 - center[0] - params.translation[0],
                    j as f64 - center[1] - params.translation[1],
                    k as f64 - center[2] - params.translation[2],
                ];
                // p = Rᵀ d / s + c
                let p = [0, 1, 2].map(|a| {
                    (r[0][a] * d[0] + r[1][a] * d[1] + r[2][a] * d[2]) / params.scale + center[a]
                });
                image.push(trilinear(v, p).unwrap_or(fill));
                mask.push(nearest(m.volume(), p).unwrap_or(0.0));
            }
        }
    }
    Ok((v.with_data(image)?, MaskVolume::new(m.volume().with_data(mask)?)?))
}

/// Draws parameters from `config` and applies them.
pub fn augment_random(
    v: &Volume,
    m: &MaskVolume,
    config: &AugmentConfig,
    rng: &mut Rng,
) -> Result<(Volume, MaskVolume)> {
    if !config.enabled {
        return Ok((v.clone(), m.clone()));
    }
    augment_affine(v, m, &config.sample(rng))
}

fn trilinear(v: &Volume, p: [f64; 3]) -> Option<f64> {
    let shape = v.shape();
    let mut lo = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let max = (shape[a] - 1) as f64;
        if !(p[a] >= 0.0 && p[a] <= max) {
            return None;
        }
        let f = p[a].floor();
        lo[a] = f as usize;
        t[a] = p[a] - f;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut weight = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let up = corner >> (2 - a) & 1 == 1;
            if up {
                if t[a] == 0.0 {
                    weight = 0.0;
                    break;
                }
                weight *= t[a];
                idx[a] = lo[a] + 1;
            } else {
                weight *= 1.0 - t[a];
                idx[a] = lo[a];
            }
        }
        if weight != 0.0 {
            acc += weight * v.get(idx[0], idx[1], idx[2]);
        }
    }
    Some(acc)
}

fn nearest(v: &Volume, p: [f64; 3]) -> Option<f64> {
    let shape = v.shape();
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let r = p[a].round();
        if !(r >= 0.0 && r <= (shape[a] - 1) as f64) {
            return None;
        }
        idx[a] = r as usize;
    }
    Some(v.get(idx[0], idx[1], idx[2]))
}
