use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{parameter_count, soft_dice_loss, AxialMlp, ModelConfig, DICE_SMOOTH};
use crate::optim::AdamState;
use crate::rng;
use crate::tensor::{Mode, Tape, Tensor};

/// Batch size used for timing, matching how training steps are usually quoted.
pub const BENCH_BATCH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub params: usize,
    /// Median wall time of forward + backward + Adam step.
    pub step_time_seconds: f64,
    pub step_times: Vec<f64>,
    /// Bytes held by the tape for backward plus parameters, gradients and
    /// both Adam moments. Transient buffers are not counted.
    pub peak_memory_estimate: usize,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Times `iterations` training steps on random data after one warm-up step.
pub fn benchmark(config: &ModelConfig, iterations: usize, seed: u64) -> Result<BenchReport> {
    config.validate()?;
    if iterations == 0 {
        return Err(Error::param("benchmark needs at least one iteration"));
    }
    let mut r = rng::seeded(seed);
    let mut model = AxialMlp::init(config.clone(), &mut r)?;
    let [d, h, w] = config.crop_shape;
    let shape = [BENCH_BATCH, d, h, w, config.in_channels];
    let n: usize = shape.iter().product();
    let x = Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(&mut r)).collect())?;
    let y = Tensor::new(
        [BENCH_BATCH, d, h, w, 1],
        x.data().iter().step_by(config.in_channels).map(|&v: &f64| f64::from(v > 1.0)).collect(),
    )?;
    let mut adam = AdamState::new();
    let mut times = Vec::with_capacity(iterations);
    let mut saved = 0;
    for i in 0..=iterations {
        let start = Instant::now();
        let tape = Tape::new();
        let pass = model.forward(&tape, &x, Mode::Train(&mut r), true)?;
        let loss = soft_dice_loss(&pass.output, &y, DICE_SMOOTH)?;
        saved = saved.max(tape.saved_bytes());
        tape.backward(&loss)?;
        model.zero_grad();
        model.accumulate_grads(&tape, &pass.params)?;
        drop(pass);
        adam.step_model(&mut model, 1e-3)?;
        if i > 0 {
            times.push(start.elapsed().as_secs_f64());
        }
    }
    let params = parameter_count(config);
    Ok(BenchReport {
        params,
        step_time_seconds: median(&times),
        step_times: times,
        peak_memory_estimate: saved + 2 * params * 8 + AdamState::bytes_for(params),
    })
}
