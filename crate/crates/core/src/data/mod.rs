//! Volumes, NIfTI-1 I/O, synthetic phantoms, preprocessing, augmentation and
//! dataset splits.

mod augment;
mod manifest;
pub mod nifti;
mod phantom;
mod preprocess;
mod volume;

pub use augment::{augment_affine, augment_random, AffineParams, AugmentConfig};
pub use manifest::{make_folds, stratified_split, DatasetManifest, ManifestEntry, Split};
pub use nifti::{read_volume, write_volume, DataType};
pub use phantom::{generate_phantom, Phantom, PhantomSpec, RibbonLengths, Stratum};
pub use preprocess::{apply_crop, apply_crop_mask, crop_bbox, paste_crop, z_normalize, CropBox, CROP_MARGIN};
pub use volume::{MaskVolume, Volume};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A preprocessed image with its reference mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Volume,
    pub mask: MaskVolume,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Volume, mask: MaskVolume) -> Result<Self> {
        if image.shape() != mask.shape() {
            return Err(Error::Dimension(format!(
                "image {:?} and mask {:?} differ in shape",
                image.shape(),
                mask.shape()
            )));
        }
        Ok(Sample {
            id: id.into(),
            image,
            mask,
        })
    }
}

/// Stacks equally shaped volumes into a `[B, D, H, W, 1]` tensor.
pub fn stack<'a>(volumes: impl IntoIterator<Item = &'a Volume>) -> Result<Tensor> {
    let mut shape = None;
    let mut data = Vec::new();
    let mut batch = 0;
    for v in volumes {
        match shape {
            None => shape = Some(v.shape()),
            Some(s) if s != v.shape() => {
                return Err(Error::Dimension(format!("cannot stack {s:?} with {:?}", v.shape())))
            }
            _ => {}
        }
        data.extend_from_slice(v.data());
        batch += 1;
    }
    let [d, h, w] = shape.ok_or_else(|| Error::Parameter("cannot stack zero volumes".into()))?;
    Tensor::new([batch, d, h, w, 1], data)
}
