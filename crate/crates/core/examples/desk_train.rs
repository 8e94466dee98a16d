//! Trains a default-geometry desk model on synthetic phantoms and reports
//! fit-set and held-out Dice against the mean-mask baseline.
//!
//! `cargo run --release -p axial-mlp --example desk_train -- [epochs] [n_train] [n_test] [n_val]`

use std::time::Instant;

use axial_mlp::data::{generate_phantom, z_normalize, AugmentConfig, PhantomSpec, Sample};
use axial_mlp::nn::{AxialMlp, ModelConfig};
use axial_mlp::optim::{mean_dice, train, TrainSchedule};
use axial_mlp::rng;

fn main() -> axial_mlp::Result<()> {
    axial_mlp::retain_freed_memory();
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let epochs = args.first().copied().unwrap_or(100);
    let n_train = args.get(1).copied().unwrap_or(16);
    let n_test = args.get(2).copied().unwrap_or(8);
    let n_val = args.get(3).copied().unwrap_or(4);
    let spec = PhantomSpec::default();
    let make = |i: u64| -> axial_mlp::Result<Sample> {
        let p = generate_phantom(&spec, &mut rng::child(7, &[i]))?;
        Sample::new(format!("p{i:03}"), z_normalize(&p.image)?, p.mask)
    };
    let fit: Vec<Sample> = (0..n_train as u64).map(make).collect::<Result<_, _>>()?;
    let held: Vec<Sample> = (1000..1000 + n_test as u64).map(make).collect::<Result<_, _>>()?;
    let val: Vec<Sample> = (500..500 + n_val as u64).map(make).collect::<Result<_, _>>()?;

    let cfg = ModelConfig {
        crop_shape: spec.shape,
        ..ModelConfig::default()
    };
    let model = AxialMlp::init(cfg, &mut rng::seeded(0))?;
    let schedule = TrainSchedule::default().with_epochs(epochs);
    let start = Instant::now();
    let out = train(model, &fit, &val, &schedule, &AugmentConfig::default(), 1, |r| {
        println!("{}  ({:.0}s)", r.log_line(), start.elapsed().as_secs_f64())
    })?;
    let masks: Vec<_> = fit.iter().map(|s| s.mask.clone()).collect();
    let mean = axial_mlp::baselines::mean_mask(&masks)?;
    let baseline: f64 = held
        .iter()
        .map(|s| axial_mlp::metrics::dice(mean.values.data(), s.mask.data()))
        .sum::<axial_mlp::Result<f64>>()?
        / held.len() as f64;
    println!("fit dice     {:.4}", mean_dice(&out.best.model, &fit, 4)?);
    println!("held-out     {:.4}", mean_dice(&out.best.model, &held, 4)?);
    println!("mean mask    {:.4}", baseline);
    Ok(())
}
