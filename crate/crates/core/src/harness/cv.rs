use std::fs;
use std::path::{Path, PathBuf};

use rand::RngCore;

use super::config::ExperimentConfig;
use super::prep::{load_crop, read_entry, preprocess, save_crop, save_prediction, training_crop};
use crate::data::{CropBox, DatasetManifest, MaskVolume, Sample, Volume};
use crate::error::{Error, Result};
use crate::metrics::{sample_metrics, MetricsReport, SampleMetrics};
use crate::nn::{AxialMlp, Checkpoint};
use crate::optim::{predict_batch, train, EpochRecord};
use crate::rng;
use crate::tensor::Tensor;

/// Caveat attached to every cross-validation report.
pub const CV_NOTE: &str = "Out-of-fold predictions come from the checkpoint that scored best on the same \
fold it is evaluated on, so cross-validation metrics may be optimistic.";

/// A preprocessed sample together with what is needed to score it on its original grid.
#[derive(Clone, Debug)]
struct Loaded {
    sample: Sample,
    full_mask: MaskVolume,
    voxel_size: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    /// Best-validation weights.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Metrics of the selected checkpoint on this fold's validation samples.
    pub validation: Vec<SampleMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CVResult {
    pub crop: CropBox,
    pub folds: Vec<FoldResult>,
    /// One report over the union of all out-of-fold predictions.
    pub cv_report: MetricsReport,
    /// Filled by [`evaluate_test`].
    pub test_report: Option<MetricsReport>,
}

impl CVResult {
    pub fn checkpoints(&self) -> Vec<&Checkpoint> {
        self.folds.iter().map(|f| &f.checkpoint).collect()
    }
}

/// Output locations under the experiment directory.
pub struct Layout<'a>(pub &'a Path);

impl Layout<'_> {
    pub fn crop(&self) -> PathBuf {
        self.0.join("crop.json")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.0.join("checkpoints")
    }
    pub fn checkpoint(&self, fold: usize) -> PathBuf {
        self.checkpoints().join(format!("fold{fold}.ckpt"))
    }
    pub fn history(&self, fold: usize) -> PathBuf {
        self.0.join("history").join(format!("fold{fold}.json"))
    }
    pub fn predictions(&self, split: &str) -> PathBuf {
        self.0.join("predictions").join(split)
    }
    pub fn cv_report(&self) -> PathBuf {
        self.0.join("cv_report.json")
    }
    pub fn test_report(&self) -> PathBuf {
        self.0.join("test_report.json")
    }
}

fn write_json(path: &Path, text: String) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    fs::write(path, text + "\n").map_err(|e| Error::file(path, e))
}

/// Loads a manifest for training and checks its fold layout against `config`.
fn load_manifest(config: &ExperimentConfig) -> Result<DatasetManifest> {
    config.validate()?;
    // validation refuses test entries that sit in a fold
    let manifest = DatasetManifest::load(&config.manifest)?;
    match manifest.folds {
        Some(k) if k == config.folds => {}
        Some(k) => {
            return Err(Error::param(format!(
                "manifest has {k} folds but the experiment asks for {}",
                config.folds
            )))
        }
        None => return Err(Error::param("manifest has no cross-validation folds")),
    }
    for k in 0..config.folds {
        if manifest.fold(k).next().is_none() {
            return Err(Error::param(format!("fold {k} is empty")));
        }
    }
    Ok(manifest)
}

/// Reads and preprocesses the training split only; test files are never opened.
fn load_training(manifest: &DatasetManifest, crop: &CropBox) -> Result<Vec<(Option<usize>, Loaded)>> {
    manifest
        .train()
        .map(|e| {
            let (image, mask) = read_entry(manifest, e)?;
            let sample = preprocess(&e.id, &image, &mask, crop)?;
            Ok((
                e.fold,
                Loaded {
                    sample,
                    full_mask: mask,
                    voxel_size: image.voxel_size(),
                },
            ))
        })
        .collect()
}

fn fold_seed(base: u64, fold: usize) -> u64 {
    rng::child(base, &[fold as u64]).next_u64()
}

/// Predicts, persists and scores `samples` with one or more models averaged.
fn predict_and_score(
    models: &[&AxialMlp],
    samples: &[&Loaded],
    crop: &CropBox,
    dir: &Path,
    batch: usize,
) -> Result<Vec<SampleMetrics>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let owned: Vec<Sample> = chunk.iter().map(|l| l.sample.clone()).collect();
        let mut mean = vec![Vec::new(); chunk.len()];
        for m in models {
            for (acc, p) in mean.iter_mut().zip(predict_batch(m, &owned)?) {
                if acc.is_empty() {
                    *acc = p;
                } else {
                    acc.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
                }
            }
        }
        let k = models.len() as f64;
        for (l, mut p) in chunk.iter().zip(mean) {
            p.iter_mut().for_each(|v| *v /= k);
            let id = &l.sample.id;
            let pred = Volume::new(crop.shape(), p)?;
            let stored = save_prediction(&pred, crop, l.voxel_size, &dir.join(format!("{id}.nii")))?;
            let vv = l.full_mask.volume().voxel_volume();
            out.push(sample_metrics(id, stored.data(), l.full_mask.data(), vv)?);
        }
    }
    Ok(out)
}

fn fit_fold(
    config: &ExperimentConfig,
    crop: &CropBox,
    fold: usize,
    data: &[(Option<usize>, Loaded)],
    on_epoch: &mut dyn FnMut(usize, &EpochRecord),
) -> Result<FoldResult> {
    let fit: Vec<Sample> = data.iter().filter(|(f, _)| *f != Some(fold)).map(|(_, l)| l.sample.clone()).collect();
    let val: Vec<&Loaded> = data.iter().filter(|(f, _)| *f == Some(fold)).map(|(_, l)| l).collect();
    let val_samples: Vec<Sample> = val.iter().map(|l| l.sample.clone()).collect();
    if fit.is_empty() || val.is_empty() {
        return Err(Error::param("fold leaves an empty training or validation set"));
    }
    let model = AxialMlp::init(config.model.clone(), &mut rng::child(config.seeds.init, &[fold as u64]))?;
    let seed = fold_seed(config.seeds.train, fold);
    let outcome = train(model, &fit, &val_samples, &config.schedule, &config.augment, seed, |r| {
        on_epoch(fold, r)
    })?;
    let mut best = outcome.best;
    best.meta.fold = Some(fold);
    let layout = Layout(&config.out_dir);
    fs::create_dir_all(layout.checkpoints()).map_err(|e| Error::file(layout.checkpoints(), e))?;
    best.save(layout.checkpoint(fold))?;
    write_json(&layout.history(fold), serde_json::to_string_pretty(&outcome.history)?)?;
    let validation = predict_and_score(
        &[&best.model],
        &val,
        crop,
        &layout.predictions("cv"),
        config.schedule.batch_size,
    )?;
    Ok(FoldResult {
        fold,
        checkpoint: best,
        history: outcome.history,
        validation,
    })
}

fn prepare(config: &ExperimentConfig) -> Result<(DatasetManifest, CropBox)> {
    let manifest = load_manifest(config)?;
    let crop = training_crop(&manifest, config.crop_margin, config.model.crop_shape)?;
    fs::create_dir_all(&config.out_dir).map_err(|e| Error::file(&config.out_dir, e))?;
    save_crop(&crop, &Layout(&config.out_dir).crop())?;
    Ok((manifest, crop))
}

/// Trains a single fold and persists its checkpoint, history and predictions.
pub fn train_fold(
    config: &ExperimentConfig,
    fold: usize,
    mut on_epoch: impl FnMut(usize, &EpochRecord),
) -> Result<FoldResult> {
    if fold >= config.folds {
        return Err(Error::param(format!("fold {fold} out of range for {} folds", config.folds)));
    }
    let (manifest, crop) = prepare(config)?;
    let data = load_training(&manifest, &crop)?;
    fit_fold(config, &crop, fold, &data, &mut on_epoch).map_err(|e| Error::Fold {
        fold,
        source: Box::new(e),
    })
}

/// Cross-validation over the manifest's folds.
///
/// Every fold trains from its own seeds, keeps its best-validation
/// checkpoint and predicts its validation samples; the union of those
/// predictions forms one report. Only training-split files are read.
pub fn run_cv(config: &ExperimentConfig) -> Result<CVResult> {
    run_cv_with(config, |_, _| {})
}

/// [`run_cv`] with a callback receiving `(fold, record)` after every epoch.
pub fn run_cv_with(config: &ExperimentConfig, mut on_epoch: impl FnMut(usize, &EpochRecord)) -> Result<CVResult> {
    let (manifest, crop) = prepare(config)?;
    let data = load_training(&manifest, &crop)?;
    let mut folds = Vec::with_capacity(config.folds);
    for k in 0..config.folds {
        let r = fit_fold(config, &crop, k, &data, &mut on_epoch).map_err(|e| Error::Fold {
            fold: k,
            source: Box::new(e),
        })?;
        folds.push(r);
    }
    // union in manifest order
    let mut union: Vec<SampleMetrics> = Vec::with_capacity(data.len());
    for e in manifest.train() {
        let found = folds
            .iter()
            .flat_map(|f| &f.validation)
            .find(|m| m.id == e.id)
            .ok_or_else(|| Error::Contract(format!("no out-of-fold prediction for {:?}", e.id)))?;
        union.push(found.clone());
    }
    let cv_report = MetricsReport::from_samples(union)?.with_note(CV_NOTE);
    write_json(&Layout(&config.out_dir).cv_report(), cv_report.to_json()?)?;
    Ok(CVResult {
        crop,
        folds,
        cv_report,
        test_report: None,
    })
}

fn check_members(checkpoints: &[&Checkpoint]) -> Result<()> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::param("an ensemble needs at least one checkpoint"))?;
    if let Some(c) = checkpoints.iter().find(|c| c.model.config() != first.model.config()) {
        return Err(Error::param(format!(
            "ensemble members disagree on the model configuration (fold {:?} vs fold {:?})",
            first.meta.fold, c.meta.fold
        )));
    }
    Ok(())
}

/// Voxelwise mean of the members' eval-mode soft predictions on a
/// preprocessed image at the models' crop shape.
pub fn ensemble_predict(checkpoints: &[&Checkpoint], image: &Volume) -> Result<MaskVolume> {
    check_members(checkpoints)?;
    let x: Tensor = image.to_tensor();
    let mut acc = vec![0.0; image.len()];
    for c in checkpoints {
        let p = c.model.predict(&x)?;
        acc.iter_mut().zip(p.data()).for_each(|(a, b)| *a += b);
    }
    let k = checkpoints.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    MaskVolume::new(image.with_data(acc)?)
}

/// Loads every `*.ckpt` under `dir`, in file-name order.
pub fn load_checkpoints(dir: &Path) -> Result<Vec<Checkpoint>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::file(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::param(format!("no checkpoints in {}", dir.display())));
    }
    paths.iter().map(Checkpoint::load).collect()
}

/// Ensembles the fold checkpoints on every test sample, persists the
/// predictions and reports on them. Refuses leaked manifests.
pub fn evaluate_test(result: &mut CVResult, config: &ExperimentConfig) -> Result<MetricsReport> {
    let manifest = load_manifest(config)?;
    let members = result.checkpoints();
    check_members(&members)?;
    let test: Vec<Loaded> = manifest
        .test()
        .map(|e| {
            let (image, mask) = read_entry(&manifest, e)?;
            Ok(Loaded {
                sample: preprocess(&e.id, &image, &mask, &result.crop)?,
                full_mask: mask,
                voxel_size: image.voxel_size(),
            })
        })
        .collect::<Result<_>>()?;
    if test.is_empty() {
        return Err(Error::param("manifest has no test samples"));
    }
    let models: Vec<&AxialMlp> = members.iter().map(|c| &c.model).collect();
    let refs: Vec<&Loaded> = test.iter().collect();
    let layout = Layout(&config.out_dir);
    let metrics = predict_and_score(
        &models,
        &refs,
        &result.crop,
        &layout.predictions("test"),
        config.schedule.batch_size,
    )?;
    let report = MetricsReport::from_samples(metrics)?;
    write_json(&layout.test_report(), report.to_json()?)?;
    result.test_report = Some(report.clone());
    Ok(report)
}

/// Loads the crop box and fold checkpoints written by an earlier run.
pub fn load_run(out_dir: &Path) -> Result<(CropBox, Vec<Checkpoint>)> {
    let layout = Layout(out_dir);
    Ok((load_crop(&layout.crop())?, load_checkpoints(&layout.checkpoints())?))
}
