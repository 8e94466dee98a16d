use std::fs;
use std::path::Path;

use crate::data::{
    apply_crop, apply_crop_mask, crop_bbox, paste_crop, read_volume, write_volume, z_normalize, CropBox, DataType,
    DatasetManifest, ManifestEntry, MaskVolume, Sample, Volume,
};
use crate::error::{Error, Result};

/// Reads a manifest entry as it is stored, without preprocessing.
pub fn read_entry(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<(Volume, MaskVolume)> {
    let image = read_volume(manifest.resolve(&entry.image))?;
    let mask = MaskVolume::new(read_volume(manifest.resolve(&entry.mask))?)?;
    if image.shape() != mask.shape() {
        return Err(Error::dim(format!(
            "{}: image {:?} and mask {:?} differ in shape",
            entry.id,
            image.shape(),
            mask.shape()
        )));
    }
    Ok((image, mask))
}

/// Fixed-size crop derived from the training masks only.
///
/// The union bounding box (plus `margin`) is recentred and resized to
/// `crop_shape` so every sample feeds the model at the same extent.
pub fn training_crop(manifest: &DatasetManifest, margin: usize, crop_shape: [usize; 3]) -> Result<CropBox> {
    let masks = manifest
        .train()
        .map(|e| Ok(MaskVolume::new(read_volume(manifest.resolve(&e.mask))?)?))
        .collect::<Result<Vec<_>>>()?;
    crop_bbox(&masks, margin)?.resized(crop_shape)
}

/// z-normalizes the full image, then crops image and mask.
pub fn preprocess(id: &str, image: &Volume, mask: &MaskVolume, crop: &CropBox) -> Result<Sample> {
    let image = apply_crop(&z_normalize(image)?, crop)?;
    Sample::new(id, image, apply_crop_mask(mask, crop)?)
}

pub fn load_sample(manifest: &DatasetManifest, entry: &ManifestEntry, crop: &CropBox) -> Result<Sample> {
    let (image, mask) = read_entry(manifest, entry)?;
    preprocess(&entry.id, &image, &mask, crop)
}

/// Maps a cropped soft prediction back to the full grid (zero outside the
/// box), writes it as float32 and returns exactly what was written.
pub fn save_prediction(pred: &Volume, crop: &CropBox, voxel_size: [f64; 3], path: &Path) -> Result<MaskVolume> {
    let full = paste_crop(pred, crop)?.with_voxel_size(voxel_size)?;
    let stored = full.with_data(full.data().iter().map(|&v| f64::from(v as f32)).collect())?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    write_volume(path, &stored, DataType::Float32)?;
    MaskVolume::new(stored)
}

pub fn save_crop(crop: &CropBox, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(crop)? + "\n").map_err(|e| Error::file(path, e))
}

pub fn load_crop(path: &Path) -> Result<CropBox> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
