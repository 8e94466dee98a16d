//! Cross-validation protocol, fold ensembling, test evaluation and benchmarking.
//!
//! A run directory produced by [`run_cv`] holds `crop.json`, one
//! checkpoint per fold under `checkpoints/`, per-fold training histories,
//! float32 NIfTI predictions under `predictions/{cv,test}/` and the JSON
//! reports, so every number can be recomputed offline.

mod bench;
mod config;
mod cv;
mod prep;
mod synth;

pub use bench::{benchmark, BenchReport, BENCH_BATCH};
pub use config::{ExperimentConfig, Seeds};
pub use cv::{
    ensemble_predict, evaluate_test, load_checkpoints, load_run, run_cv, run_cv_with, train_fold, CVResult,
    FoldResult, Layout, CV_NOTE,
};
pub use prep::{load_crop, load_sample, preprocess, read_entry, save_prediction, training_crop};
pub use synth::synthesize;
