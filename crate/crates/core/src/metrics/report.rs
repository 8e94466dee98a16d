use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::pearson_r;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub dice: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub ver: Option<f64>,
    pub aver: Option<f64>,
    /// Soft volume `Σx` times the voxel volume.
    pub pred_volume: f64,
    pub true_volume: f64,
}

/// Mean and empirical (divide-by-n) standard deviation over defined values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    /// How many samples contributed.
    pub defined: usize,
    /// How many samples had an undefined value.
    pub undefined: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut defined = Vec::new();
        let mut undefined = 0;
        for v in values {
            match v {
                Some(v) => defined.push(v),
                None => undefined += 1,
            }
        }
        if defined.is_empty() {
            return Summary {
                mean: None,
                sd: None,
                defined: 0,
                undefined,
            };
        }
        let n = defined.len() as f64;
        let mean = defined.iter().sum::<f64>() / n;
        let var = defined.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Summary {
            mean: Some(mean),
            sd: Some(var.sqrt()),
            defined: defined.len(),
            undefined,
        }
    }

    fn cell(&self) -> String {
        match (self.mean, self.sd) {
            (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
            _ => "N/A".to_string(),
        }
    }
}

/// Per-sample metrics plus dataset-level aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Free-form caveat printed above tables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub samples: Vec<SampleMetrics>,
    pub dice: Summary,
    pub precision: Summary,
    pub recall: Summary,
    pub ver: Summary,
    pub aver: Summary,
    /// Pearson's r between predicted and reference volumes; `None` when
    /// undefined (fewer than two samples or a constant series).
    pub pearson_r: Option<f64>,
}

impl MetricsReport {
    pub fn from_samples(samples: Vec<SampleMetrics>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::param("cannot build a report from zero samples"));
        }
        let pred: Vec<f64> = samples.iter().map(|s| s.pred_volume).collect();
        let truth: Vec<f64> = samples.iter().map(|s| s.true_volume).collect();
        Ok(MetricsReport {
            note: None,
            dice: Summary::of(samples.iter().map(|s| s.dice)),
            precision: Summary::of(samples.iter().map(|s| s.precision)),
            recall: Summary::of(samples.iter().map(|s| s.recall)),
            ver: Summary::of(samples.iter().map(|s| s.ver)),
            aver: Summary::of(samples.iter().map(|s| s.aver)),
            pearson_r: pearson_r(&pred, &truth).ok(),
            samples,
        })
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Aligned summary row (Dice, Precision, Recall, MVER, MAVER, Pearson's r)
    /// followed by per-sample rows.
    pub fn to_table(&self, label: &str) -> String {
        let mut out = String::new();
        if let Some(note) = &self.note {
            for line in note.lines() {
                let _ = writeln!(out, "# {line}");
            }
        }
        let width = label.len().max(12);
        let _ = writeln!(
            out,
            "{:width$}  {:>15}  {:>15}  {:>15}  {:>15}  {:>15}  {:>11}",
            "", "Dice", "Precision", "Recall", "MVER", "MAVER", "Pearson's r"
        );
        let r = self
            .pearson_r
            .map_or_else(|| "N/A".to_string(), |r| format!("{r:.3}"));
        let _ = writeln!(
            out,
            "{label:width$}  {:>15}  {:>15}  {:>15}  {:>15}  {:>15}  {:>11}",
            self.dice.cell(),
            self.precision.cell(),
            self.recall.cell(),
            self.ver.cell(),
            self.aver.cell(),
            r
        );
        let _ = writeln!(out);
        let id_width = self.samples.iter().map(|s| s.id.len()).max().unwrap_or(2).max(2);
        let _ = writeln!(
            out,
            "{:id_width$}  {:>8}  {:>9}  {:>8}  {:>8}  {:>8}  {:>12}  {:>12}",
            "id", "dice", "precision", "recall", "ver", "aver", "pred_volume", "true_volume"
        );
        let f = |v: Option<f64>| v.map_or_else(|| "N/A".to_string(), |v| format!("{v:.4}"));
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{:id_width$}  {:>8}  {:>9}  {:>8}  {:>8}  {:>8}  {:>12.2}  {:>12.2}",
                s.id,
                f(s.dice),
                f(s.precision),
                f(s.recall),
                f(s.ver),
                f(s.aver),
                s.pred_volume,
                s.true_volume
            );
        }
        out
    }

    /// One CSV row per sample; undefined values are written as `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,dice,precision,recall,ver,aver,pred_volume,true_volume\n");
        let f = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v}"));
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                s.id,
                f(s.dice),
                f(s.precision),
                f(s.recall),
                f(s.ver),
                f(s.aver),
                s.pred_volume,
                s.true_volume
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::super::sample_metrics;
    use super::*;

    #[test]
    fn single_perfect_pair() {
        let y = [1.0, 0.0, 1.0];
        let r = MetricsReport::from_samples(vec![sample_metrics("a", &y, &y, 1.0).unwrap()]).unwrap();
        assert_eq!(r.dice.mean, Some(1.0));
        assert_eq!(r.dice.sd, Some(0.0));
        assert_eq!(r.precision.mean, Some(1.0));
        assert_eq!(r.recall.mean, Some(1.0));
        assert_eq!(r.ver.mean, Some(0.0));
        assert_eq!(r.aver.mean, Some(0.0));
        assert_eq!(r.pearson_r, None);
    }

    #[test]
    fn identical_pairs_aggregate_to_the_single_value() {
        let x = [0.2, 0.9, 0.4, 0.0];
        let y = [0.0, 1.0, 1.0, 0.0];
        let one = sample_metrics("s", &x, &y, 1.0).unwrap();
        let r = MetricsReport::from_samples(vec![one.clone(); 5]).unwrap();
        assert!((r.dice.mean.unwrap() - one.dice.unwrap()).abs() < 1e-15);
        assert!(r.dice.sd.unwrap() < 1e-15);
    }

    #[test]
    fn sd_is_biased() {
        let s = Summary::of([Some(1.0), Some(3.0)]);
        assert_eq!(s.mean, Some(2.0));
        assert_eq!(s.sd, Some(1.0));
        let s = Summary::of([None, Some(3.0)]);
        assert_eq!((s.defined, s.undefined), (1, 1));
    }

    #[test]
    fn undefined_values_render_as_markers() {
        let z = [0.0; 2];
        let r = MetricsReport::from_samples(vec![sample_metrics("empty", &z, &z, 1.0).unwrap()])
            .unwrap()
            .with_note("best-checkpoint selection");
        assert_eq!(r.dice.mean, None);
        let table = r.to_table("model");
        assert!(table.starts_with("# best-checkpoint selection"));
        assert!(table.contains("N/A"));
        assert!(r.to_csv().contains("empty,NA,NA,NA,NA,NA,0,0"));
        let back = MetricsReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn empty_report_is_an_error() {
        assert!(MetricsReport::from_samples(Vec::new()).is_err());
    }
}
