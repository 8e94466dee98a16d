use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{generate_phantom, write_volume, DataType, DatasetManifest, ManifestEntry, PhantomSpec};
use crate::error::{Error, Result};
use crate::rng;

/// Writes `count` phantoms (float32 images, uint8 masks) and a manifest
/// listing them into `out_dir`. Sample `i` depends only on `(seed, i)`.
pub fn synthesize(spec: &PhantomSpec, count: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::param("phantom count must be positive"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("phantom-{i:04}");
        let p = generate_phantom(spec, &mut rng::child(seed, &[i as u64]))?;
        let image = PathBuf::from(format!("{id}_img.nii"));
        let mask = PathBuf::from(format!("{id}_mask.nii"));
        write_volume(out_dir.join(&image), &p.image, DataType::Float32)?;
        write_volume(out_dir.join(&mask), p.mask.volume(), DataType::Uint8)?;
        entries.push(ManifestEntry {
            id,
            image,
            mask,
            stratum: p.stratum.name().to_string(),
            split: None,
            fold: None,
        });
    }
    let mut manifest = DatasetManifest::new(entries)?;
    manifest.base_dir = out_dir.to_path_buf();
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}
