use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A 3D scalar image, row-major with the last axis fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    voxel_size: [f64; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("volume extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::dim(format!(
                "volume {shape:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        Ok(Volume {
            shape,
            voxel_size: [1.0; 3],
            data,
        })
    }

    pub fn zeros(shape: [usize; 3]) -> Result<Self> {
        Self::new(shape, vec![0.0; shape.iter().product()])
    }

    /// Sets the voxel spacing in mm.
    pub fn with_voxel_size(mut self, voxel_size: [f64; 3]) -> Result<Self> {
        if voxel_size.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::param(format!("voxel sizes must be positive, got {voxel_size:?}")));
        }
        self.voxel_size = voxel_size;
        Ok(self)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.voxel_size.iter().product()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    /// Same geometry, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Ok(Volume {
            voxel_size: self.voxel_size,
            ..Volume::new(self.shape, data)?
        })
    }

    /// `[1, D, H, W, 1]` tensor view for the network.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.shape;
        Tensor::new([1, d, h, w, 1], self.data.clone()).expect("volume and tensor sizes agree")
    }
}

/// A soft or binary mask: a [`Volume`] whose values lie in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume(Volume);

impl MaskVolume {
    pub fn new(volume: Volume) -> Result<Self> {
        if let Some(v) = volume.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::param(format!("mask values must lie in [0, 1], found {v}")));
        }
        Ok(MaskVolume(volume))
    }

    /// Clamps into `[0, 1]` instead of rejecting.
    pub fn clamped(mut volume: Volume) -> Self {
        volume.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        MaskVolume(volume)
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }

    pub fn shape(&self) -> [usize; 3] {
        self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    /// True when every value is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.0.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Σ values × voxel volume, in mm³.
    pub fn soft_volume(&self) -> f64 {
        self.0.data.iter().sum::<f64>() * self.0.voxel_volume()
    }

    pub fn count_nonzero(&self) -> usize {
        self.0.data.iter().filter(|&&v| v != 0.0).count()
    }
}
