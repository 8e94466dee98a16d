//! Dataset listing with strata, train/test split and cross-validation folds.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub image: PathBuf,
    pub mask: PathBuf,
    pub stratum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folds: Option<usize>,
    /// Directory relative paths are resolved against; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = DatasetManifest {
            entries,
            folds: None,
            base_dir: PathBuf::new(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Checks id uniqueness and split/fold consistency.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::param(format!("duplicate manifest id {:?}", e.id)));
            }
            if let Some(f) = e.fold {
                if e.split == Some(Split::Test) {
                    return Err(Error::Leakage(format!(
                        "test entry {:?} is assigned to cross-validation fold {f}",
                        e.id
                    )));
                }
                if e.split != Some(Split::Train) {
                    return Err(Error::param(format!("entry {:?} has a fold but is not in the training split", e.id)));
                }
                match self.folds {
                    Some(k) if f < k => {}
                    _ => return Err(Error::param(format!("entry {:?} has fold {f} outside the declared fold count", e.id))),
                }
            }
        }
        if self.folds.is_some() {
            if let Some(e) = self.train().find(|e| e.fold.is_none()) {
                return Err(Error::param(format!("training entry {:?} has no fold", e.id)));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::file(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn train(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Some(Split::Train))
    }

    pub fn test(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Some(Split::Test))
    }

    /// Training entries of fold `k` (its validation set).
    pub fn fold(&self, k: usize) -> impl Iterator<Item = &ManifestEntry> {
        self.train().filter(move |e| e.fold == Some(k))
    }

    /// Training entries outside fold `k`.
    pub fn fold_complement(&self, k: usize) -> impl Iterator<Item = &ManifestEntry> {
        self.train().filter(move |e| e.fold != Some(k))
    }

    fn strata<'a>(entries: impl Iterator<Item = &'a ManifestEntry>) -> BTreeMap<&'a str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, e) in entries.enumerate() {
            map.entry(e.stratum.as_str()).or_default().push(i);
        }
        map
    }
}

/// Per-stratum test quotas by the largest-remainder rule, summing to
/// `round(n · fraction)`.
fn quotas(sizes: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let target = (total as f64 * fraction).round() as usize;
    let exact: Vec<f64> = sizes.iter().map(|&s| s as f64 * fraction).collect();
    let mut q: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    // stable sort keeps stratum-name order on ties
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut missing = target.saturating_sub(q.iter().sum());
    for &i in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if q[i] < sizes[i] {
            q[i] += 1;
            missing -= 1;
        }
    }
    q
}

/// Assigns every entry to train or test, stratum by stratum. Existing fold
/// assignments are cleared.
pub fn stratified_split(manifest: &DatasetManifest, test_fraction: f64, rng: &mut Rng) -> Result<DatasetManifest> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::param(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    if manifest.entries.is_empty() {
        return Err(Error::param("cannot split an empty manifest"));
    }
    manifest.validate()?;
    let strata = DatasetManifest::strata(manifest.entries.iter());
    let sizes: Vec<usize> = strata.values().map(Vec::len).collect();
    let q = quotas(&sizes, test_fraction);
    let n_test: usize = q.iter().sum();
    if n_test == 0 || n_test == manifest.entries.len() {
        return Err(Error::param(format!(
            "test fraction {test_fraction} leaves an empty train or test set for {} entries",
            manifest.entries.len()
        )));
    }
    let mut out = manifest.clone();
    out.folds = None;
    for (members, &quota) in strata.values().zip(&q) {
        let mut shuffled = members.clone();
        shuffled.shuffle(rng);
        for (pos, &i) in shuffled.iter().enumerate() {
            out.entries[i].split = Some(if pos < quota { Split::Test } else { Split::Train });
            out.entries[i].fold = None;
        }
    }
    Ok(out)
}

/// Deals the training entries into `k` folds: each stratum is shuffled and
/// the strata are dealt round-robin in name order, so fold sizes differ by at
/// most one and so do per-stratum counts.
pub fn make_folds(manifest: &DatasetManifest, k: usize, rng: &mut Rng) -> Result<DatasetManifest> {
    if k < 2 {
        return Err(Error::param(format!("need at least 2 folds, got {k}")));
    }
    let train: Vec<usize> = manifest
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.split == Some(Split::Train))
        .map(|(i, _)| i)
        .collect();
    if train.is_empty() {
        return Err(Error::param("no training entries to fold; run the split first"));
    }
    let strata = DatasetManifest::strata(train.iter().map(|&i| &manifest.entries[i]));
    let smallest = strata.values().map(Vec::len).min().unwrap_or(0);
    if k > smallest {
        return Err(Error::param(format!(
            "{k} folds exceed the smallest training stratum ({smallest} entries)"
        )));
    }
    let mut out = manifest.clone();
    out.folds = Some(k);
    let mut next = 0usize;
    for members in strata.values() {
        let mut shuffled: Vec<usize> = members.iter().map(|&m| train[m]).collect();
        shuffled.shuffle(rng);
        for i in shuffled {
            out.entries[i].fold = Some(next % k);
            next += 1;
        }
    }
    out.validate()?;
    Ok(out)
}
