//! Overlap and volume metrics on soft masks.
//!
//! Predictions are never binarized: every formula is evaluated directly on
//! values in `[0, 1]`. A metric whose denominator vanishes is reported as
//! undefined ([`Error::Undefined`] from the scalar functions, `None` inside
//! a [`MetricsReport`]) and never replaced by zero.

mod report;

pub use report::{MetricsReport, SampleMetrics, Summary};

use crate::error::{Error, Result};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::dim(format!(
            "prediction has {} voxels, reference has {}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

/// `(Σ x·y, Σ x, Σ y)`.
fn sums(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let (mut xy, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        xy += a * b;
        sx += a;
        sy += b;
    }
    (xy, sx, sy)
}

fn ratio(num: f64, den: f64, what: &str) -> Result<f64> {
    if den == 0.0 {
        return Err(Error::Undefined(format!("{what}: zero denominator")));
    }
    Ok(num / den)
}

/// `2Σxy / (Σx + Σy)`.
pub fn dice(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let (xy, sx, sy) = sums(x, y);
    ratio(2.0 * xy, sx + sy, "dice")
}

/// `Σxy / Σx`.
pub fn precision(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let (xy, sx, _) = sums(x, y);
    ratio(xy, sx, "precision")
}

/// `Σxy / Σy`.
pub fn recall(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let (xy, _, sy) = sums(x, y);
    ratio(xy, sy, "recall")
}

/// Signed relative volume error `(Σx − Σy) / Σy`.
pub fn volume_error_rate(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let (_, sx, sy) = sums(x, y);
    ratio(sx - sy, sy, "volume error rate")
}

pub fn absolute_volume_error_rate(x: &[f64], y: &[f64]) -> Result<f64> {
    volume_error_rate(x, y).map(f64::abs)
}

/// Tight range of the volume error rate for a given Dice score `d > 0`.
///
/// Follows from `Σxy ≤ min(Σx, Σy)`, which holds for soft masks in `[0, 1]`:
/// the lower end is reached when the prediction lies inside the reference,
/// the upper end when it contains it.
pub fn ver_bounds(d: f64) -> (f64, f64) {
    (-2.0 * (1.0 - d) / (2.0 - d), 2.0 * (1.0 - d) / d)
}

/// Sample Pearson correlation between predicted and reference volumes.
pub fn pearson_r(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    if pred.len() < 2 {
        return Err(Error::Undefined(format!(
            "pearson r needs at least 2 pairs, got {}",
            pred.len()
        )));
    }
    let n = pred.len() as f64;
    let mx = pred.iter().sum::<f64>() / n;
    let my = truth.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in pred.iter().zip(truth) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("pearson r of a constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Metrics for one (prediction, reference) pair.
pub fn sample_metrics(id: &str, x: &[f64], y: &[f64], voxel_volume: f64) -> Result<SampleMetrics> {
    check_pair(x, y)?;
    if let Some(v) = x.iter().chain(y).find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::param(format!(
            "{id}: mask values must lie in [0, 1], found {v}"
        )));
    }
    let (xy, sx, sy) = sums(x, y);
    let defined = |num: f64, den: f64| (den != 0.0).then(|| num / den);
    let ver = defined(sx - sy, sy);
    Ok(SampleMetrics {
        id: id.to_string(),
        dice: defined(2.0 * xy, sx + sy),
        precision: defined(xy, sx),
        recall: defined(xy, sy),
        ver,
        aver: ver.map(f64::abs),
        pred_volume: sx * voxel_volume,
        true_volume: sy * voxel_volume,
    })
}

/// One report over a list of `(id, prediction, reference, voxel volume)`.
pub fn evaluate<'a, I>(pairs: I) -> Result<MetricsReport>
where
    I: IntoIterator<Item = (&'a str, &'a [f64], &'a [f64], f64)>,
{
    let samples = pairs
        .into_iter()
        .map(|(id, x, y, vv)| sample_metrics(id, x, y, vv))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_samples(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    #[test]
    fn perfect_and_disjoint() {
        let y = [1.0, 1.0, 0.0, 0.0];
        assert_eq!(dice(&y, &y).unwrap(), 1.0);
        assert_eq!(precision(&y, &y).unwrap(), 1.0);
        assert_eq!(recall(&y, &y).unwrap(), 1.0);
        let x = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(dice(&x, &y).unwrap(), 0.0);
        assert_eq!(precision(&x, &y).unwrap(), 0.0);
        assert_eq!(recall(&x, &y).unwrap(), 0.0);
    }

    #[test]
    fn all_ones_against_half() {
        let x = [1.0; 8];
        let y = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        assert!((dice(&x, &y).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(precision(&x, &y).unwrap(), 0.5);
        assert_eq!(recall(&x, &y).unwrap(), 1.0);
    }

    #[test]
    fn volume_error_rates() {
        let y = [1.0, 0.0, 1.0, 0.0];
        assert_eq!(volume_error_rate(&y, &y).unwrap(), 0.0);
        assert_eq!(volume_error_rate(&[1.0, 1.0, 1.0, 1.0], &y).unwrap(), 1.0);
        assert_eq!(volume_error_rate(&[0.0; 4], &y).unwrap(), -1.0);
        assert_eq!(absolute_volume_error_rate(&[0.0; 4], &y).unwrap(), 1.0);
    }

    #[test]
    fn undefined_denominators() {
        let z = [0.0; 3];
        assert!(matches!(dice(&z, &z), Err(Error::Undefined(_))));
        assert!(matches!(precision(&z, &[1.0, 0.0, 0.0]), Err(Error::Undefined(_))));
        assert!(matches!(recall(&[1.0, 0.0, 0.0], &z), Err(Error::Undefined(_))));
        assert!(matches!(volume_error_rate(&[1.0, 0.0, 0.0], &z), Err(Error::Undefined(_))));
        let m = sample_metrics("e", &z, &z, 1.0).unwrap();
        assert_eq!((m.dice, m.precision, m.recall, m.ver, m.aver), (None, None, None, None, None));
        assert!(dice(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn ver_bounds_are_attained_by_nested_masks() {
        let y = [1.0, 1.0, 1.0, 0.0];
        let inside = [1.0, 0.0, 0.0, 0.0];
        let d = dice(&inside, &y).unwrap();
        assert_eq!(d, 0.5);
        let v = volume_error_rate(&inside, &y).unwrap();
        assert!((v - ver_bounds(d).0).abs() < 1e-15);
        // the naive range [d − 1, 1/d − 1] does not contain it
        assert!(v < d - 1.0);

        let y = [1.0, 0.0, 0.0, 0.0];
        let outside = [1.0, 1.0, 1.0, 0.0];
        let d = dice(&outside, &y).unwrap();
        let v = volume_error_rate(&outside, &y).unwrap();
        assert!((v - ver_bounds(d).1).abs() < 1e-15);
        assert!(v > 1.0 / d - 1.0);
    }

    #[test]
    fn pearson_cases() {
        let t = [1.0, 4.0, 2.5, 7.0];
        assert!((pearson_r(&t, &t).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = t.iter().map(|v| 10.0 - v).collect();
        assert!((pearson_r(&neg, &t).unwrap() + 1.0).abs() < 1e-15);
        let r = pearson_r(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0]).unwrap();
        assert!((r - 0.5).abs() < 1e-15);
        assert!(matches!(pearson_r(&[2.0; 3], &t[..3]), Err(Error::Undefined(_))));
        assert!(matches!(pearson_r(&[1.0], &[1.0]), Err(Error::Undefined(_))));
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        assert!(sample_metrics("a", &[1.5], &[1.0], 1.0).is_err());
    }

    fn soft_pair(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut r = rng::seeded(seed);
        let x = (0..n).map(|_| r.gen::<f64>()).collect();
        let y = (0..n).map(|_| if r.gen_bool(0.3) { r.gen::<f64>() } else { 0.0 }).collect();
        (x, y)
    }

    proptest! {
        #[test]
        fn harmonic_mean_and_symmetry(seed in any::<u64>(), n in 1usize..64) {
            let (x, y) = soft_pair(seed, n);
            if let (Ok(d), Ok(p), Ok(r)) = (dice(&x, &y), precision(&x, &y), recall(&x, &y)) {
                if d > 0.0 {
                    prop_assert!((1.0 / d - (1.0 / p + 1.0 / r) / 2.0).abs() < 1e-12 * (1.0 / d));
                }
                prop_assert!((dice(&y, &x).unwrap() - d).abs() < 1e-15);
                prop_assert!((precision(&x, &y).unwrap() - recall(&y, &x).unwrap()).abs() < 1e-15);
            }
        }

        #[test]
        fn ver_is_bounded_by_dice(seed in any::<u64>(), n in 1usize..64) {
            let (x, y) = soft_pair(seed, n);
            if let (Ok(d), Ok(v)) = (dice(&x, &y), volume_error_rate(&x, &y)) {
                if d > 0.0 {
                    let (lo, hi) = ver_bounds(d);
                    prop_assert!(lo <= v + 1e-12 && v <= hi + 1e-12, "d={d} ver={v} bounds=({lo}, {hi})");
                }
            }
        }

        #[test]
        fn permutation_invariance(seed in any::<u64>(), n in 2usize..40) {
            let (x, y) = soft_pair(seed, n);
            let mut order: Vec<usize> = (0..n).collect();
            let mut r = rng::seeded(seed ^ 0xABCD);
            for i in (1..n).rev() {
                order.swap(i, r.gen_range(0..=i));
            }
            let px: Vec<f64> = order.iter().map(|&i| x[i]).collect();
            let py: Vec<f64> = order.iter().map(|&i| y[i]).collect();
            let a = sample_metrics("a", &x, &y, 1.0).unwrap();
            let b = sample_metrics("a", &px, &py, 1.0).unwrap();
            let close = |u: Option<f64>, v: Option<f64>| match (u, v) {
                (Some(u), Some(v)) => (u - v).abs() <= 1e-12 * u.abs().max(1.0),
                (None, None) => true,
                _ => false,
            };
            prop_assert!(close(a.dice, b.dice));
            prop_assert!(close(a.precision, b.precision));
            prop_assert!(close(a.recall, b.recall));
            prop_assert!(close(a.ver, b.ver));
        }
    }
}
