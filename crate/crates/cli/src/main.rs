//! `axial-mlp` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or parse error, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use axial_mlp::baselines::{mean_mask, optimized_mask, total_dice};
use axial_mlp::data::{
    apply_crop, make_folds, paste_crop, read_volume, stratified_split, write_volume, z_normalize, DataType,
    DatasetManifest, ManifestEntry, MaskVolume, PhantomSpec,
};
use axial_mlp::harness::{
    benchmark, ensemble_predict, evaluate_test, load_checkpoints, load_crop, read_entry, run_cv_with, synthesize,
    train_fold, ExperimentConfig, CV_NOTE,
};
use axial_mlp::metrics::{sample_metrics, MetricsReport};
use axial_mlp::rng;

#[derive(Parser)]
#[command(name = "axial-mlp", version, about = "Axial-MLP volumetric segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantoms and a manifest listing them.
    Synth {
        /// Phantom specification (JSON); defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stratified train/test split plus cross-validation folds, in place.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        test_fraction: f64,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a single cross-validation fold.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        fold: usize,
    },
    /// Full cross-validation, then the fold ensemble on the test split.
    Cv {
        #[arg(long)]
        config: PathBuf,
    },
    /// Ensemble prediction for one image.
    Predict {
        /// Directory holding `*.ckpt` files; `crop.json` is looked up here and one level up.
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Image-independent baseline from the training masks.
    Baseline {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        kind: BaselineKind,
        /// Output stem; `.nii` and `.json` are appended.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        lr: f64,
    },
    /// Score persisted predictions against the manifest masks.
    Eval {
        /// Directory of `<id>.nii` predictions.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        split: EvalSplit,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a saved report.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Time training steps at batch size 4.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        iterations: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Mean,
    Optimized,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalSplit {
    /// Training split, scored as out-of-fold predictions.
    Val,
    Test,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Table,
    Csv,
}

fn main() -> ExitCode {
    axial_mlp::retain_freed_memory();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<axial_mlp::Error>()) {
        Some(err) if matches!(err.root(), axial_mlp::Error::Numerical(_)) => 3,
        _ => 2,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { spec, count, seed, out } => {
            let spec = match spec {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => PhantomSpec::default(),
            };
            let m = synthesize(&spec, count, seed, &out)?;
            println!("wrote {} phantoms and {}", m.entries.len(), out.join("manifest.json").display());
        }
        Command::Split {
            manifest,
            test_fraction,
            folds,
            seed,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let m = stratified_split(&m, test_fraction, &mut rng::child(seed, &[rng::hash_str("split")]))?;
            let m = make_folds(&m, folds, &mut rng::child(seed, &[rng::hash_str("folds")]))?;
            m.save(&manifest)?;
            println!("{} train / {} test, {folds} folds", m.train().count(), m.test().count());
        }
        Command::Train { config, fold } => {
            let cfg = ExperimentConfig::load(&config)?;
            let r = train_fold(&cfg, fold, |_, rec| eprintln!("{}", rec.log_line()))?;
            println!(
                "fold {fold}: best epoch {:?}, validation Dice {:.4}",
                r.checkpoint.meta.epoch,
                r.checkpoint.meta.val_dice.unwrap_or(f64::NAN)
            );
        }
        Command::Cv { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let mut result = run_cv_with(&cfg, |k, rec| eprintln!("fold {k}  {}", rec.log_line()))?;
            println!("{}", result.cv_report.to_table("cross-validation"));
            let has_test = DatasetManifest::load(&cfg.manifest)?.test().next().is_some();
            if has_test {
                let report = evaluate_test(&mut result, &cfg)?;
                println!("{}", report.to_table("test (fold ensemble)"));
            }
        }
        Command::Predict { checkpoints, input, out } => {
            let members = load_checkpoints(&checkpoints)?;
            let crop_path = [checkpoints.join("crop.json"), checkpoints.join("../crop.json")]
                .into_iter()
                .find(|p| p.is_file())
                .with_context(|| format!("no crop.json in or above {}", checkpoints.display()))?;
            let crop = load_crop(&crop_path)?;
            let image = read_volume(&input)?;
            let x = apply_crop(&z_normalize(&image)?, &crop)?;
            let refs: Vec<_> = members.iter().collect();
            let pred = ensemble_predict(&refs, &x)?;
            let full = paste_crop(pred.volume(), &crop)?.with_voxel_size(image.voxel_size())?;
            write_volume(&out, &full, DataType::Float32)?;
            println!("wrote {}", out.display());
        }
        Command::Baseline {
            manifest,
            kind,
            out,
            steps,
            lr,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let masks = training_masks(&m)?;
            let (baseline, name) = match kind {
                BaselineKind::Mean => (mean_mask(&masks)?, "mean"),
                BaselineKind::Optimized => (optimized_mask(&masks, steps, lr)?, "optimized"),
            };
            let stem = out.unwrap_or_else(|| m.base_dir.join(format!("baseline_{name}")));
            baseline.save(&stem)?;
            println!(
                "{name} mask: total Dice {:.4} over {} training masks, wrote {}",
                total_dice(baseline.values.data(), &masks),
                masks.len(),
                stem.with_extension("nii").display()
            );
        }
        Command::Eval {
            pred,
            manifest,
            split,
            out,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let entries: Vec<&ManifestEntry> = match split {
                EvalSplit::Val => m.train().collect(),
                EvalSplit::Test => m.test().collect(),
            };
            if entries.is_empty() {
                bail!("the manifest has no entries in the requested split");
            }
            let report = evaluate_dir(&m, &entries, &pred)?;
            let report = match split {
                EvalSplit::Val => report.with_note(CV_NOTE),
                EvalSplit::Test => report,
            };
            fs::write(&out, report.to_json()? + "\n").with_context(|| format!("writing {}", out.display()))?;
            println!("{}", report.to_table(&label(&out)));
        }
        Command::Report { input, format } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let report = MetricsReport::from_json(&text)?;
            match format {
                Format::Table => println!("{}", report.to_table(&label(&input))),
                Format::Csv => print!("{}", report.to_csv()),
            }
        }
        Command::Bench { config, iterations } => {
            let cfg = ExperimentConfig::load(&config)?;
            let b = benchmark(&cfg.model, iterations, cfg.seeds.init)?;
            println!("{}", serde_json::to_string_pretty(&b)?);
        }
    }
    Ok(())
}

fn label(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn training_masks(m: &DatasetManifest) -> Result<Vec<MaskVolume>> {
    let train: Vec<_> = m.train().collect();
    if train.is_empty() {
        bail!("the manifest has no training split; run `split` first");
    }
    train
        .iter()
        .map(|e| Ok(MaskVolume::new(read_volume(m.resolve(&e.mask))?)?))
        .collect()
}

fn evaluate_dir(m: &DatasetManifest, entries: &[&ManifestEntry], dir: &Path) -> Result<MetricsReport> {
    let mut rows = Vec::with_capacity(entries.len());
    for e in entries {
        let (_, mask) = read_entry(m, e)?;
        let path = dir.join(format!("{}.nii", e.id));
        let pred = read_volume(&path)?;
        if pred.shape() != mask.shape() {
            bail!("{}: prediction {:?} and mask {:?} differ in shape", e.id, pred.shape(), mask.shape());
        }
        rows.push(sample_metrics(&e.id, pred.data(), mask.data(), mask.volume().voxel_volume())?);
    }
    Ok(MetricsReport::from_samples(rows)?)
}
