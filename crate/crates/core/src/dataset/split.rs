//! Labeled/unlabeled partitioning of a manifest.

use super::{DatasetManifest, TaskMode};
use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitStrategy {
    /// Per class, `round(fraction * count)` samples become labeled.
    Stratified { labeled_fraction: f64 },
    /// Exactly `n` labeled samples for every class.
    ExactPerClass { n: usize },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub strategy: SplitStrategy,
    pub seed: u64,
}

/// Disjoint cover of the manifest's record indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitResult {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Class used for stratification. Multi-label records stratify on their
/// rarest positive class, a cheap approximation of iterative stratification.
fn strat_class(manifest: &DatasetManifest, class_counts: &[usize], record: usize) -> Option<usize> {
    let labels = &manifest.records[record].labels;
    if labels.is_empty() {
        return None;
    }
    match manifest.task_mode {
        TaskMode::SingleLabel => Some(labels[0]),
        TaskMode::MultiLabel => labels.iter().copied().min_by_key(|&c| class_counts[c]),
    }
}

/// Partition record indices into labeled and unlabeled pools. Deterministic
/// under `spec.seed`; records without annotations always land in the
/// unlabeled pool.
pub fn split(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<SplitResult> {
    let all: Vec<usize> = (0..manifest.records.len()).collect();
    split_indices(manifest, &all, spec)
}

/// Like [`split`], but restricted to a candidate subset of record indices
/// (e.g. the training portion of a manifest).
pub fn split_indices(
    manifest: &DatasetManifest,
    candidates: &[usize],
    spec: &SplitSpec,
) -> Result<SplitResult> {
    let k = manifest.num_classes;
    let mut class_counts = vec![0usize; k];
    for &i in candidates {
        for &c in &manifest.records[i].labels {
            class_counts[c] += 1;
        }
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut unlabeled = Vec::new();
    for &i in candidates {
        match strat_class(manifest, &class_counts, i) {
            Some(c) => by_class[c].push(i),
            None => unlabeled.push(i),
        }
    }

    let mut labeled = Vec::new();
    for (c, pool) in by_class.iter_mut().enumerate() {
        if pool.is_empty() {
            continue;
        }
        let take = match spec.strategy {
            SplitStrategy::Stratified { labeled_fraction } => {
                if !(0.0..=1.0).contains(&labeled_fraction) || labeled_fraction <= 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "labeled_fraction {labeled_fraction} outside (0, 1]"
                    )));
                }
                let n = (labeled_fraction * pool.len() as f64).round() as usize;
                if n == 0 {
                    return Err(Error::InfeasibleSplit(format!(
                        "class {c}: fraction {labeled_fraction} of {} rounds to zero labeled samples",
                        pool.len()
                    )));
                }
                n.min(pool.len())
            }
            SplitStrategy::ExactPerClass { n } => {
                if pool.len() < n {
                    return Err(Error::InfeasibleSplit(format!(
                        "class {c}: {} candidates < requested {n}",
                        pool.len()
                    )));
                }
                n
            }
        };
        let mut rng = rng::stream(spec.seed, "split", &[c as u64]);
        pool.shuffle(&mut rng);
        labeled.extend_from_slice(&pool[..take]);
        unlabeled.extend_from_slice(&pool[take..]);
    }
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok(SplitResult { labeled, unlabeled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetSidecar, GeoTemporal, ManifestRecord};
    use std::path::PathBuf;

    fn manifest_with_classes(counts: &[usize]) -> DatasetManifest {
        let mut records = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                records.push(ManifestRecord {
                    id: format!("c{c}-{i}"),
                    image_path: String::new(),
                    labels: vec![c],
                    meta: GeoTemporal {
                        latitude: 0.0,
                        longitude: 0.0,
                        day_of_year: Some(1.0),
                    },
                });
            }
        }
        DatasetManifest {
            root: PathBuf::new(),
            task_mode: TaskMode::SingleLabel,
            num_classes: counts.len(),
            image_size: 8,
            sidecar: DatasetSidecar {
                task_mode: TaskMode::SingleLabel,
                num_classes: counts.len(),
                image_size: 8,
                generator: None,
                metadata_baseline: None,
            },
            records,
        }
    }

    #[test]
    fn stratified_balanced_two_classes() {
        let m = manifest_with_classes(&[50, 50]);
        let spec = SplitSpec {
            strategy: SplitStrategy::Stratified { labeled_fraction: 0.1 },
            seed: 3,
        };
        let res = split(&m, &spec).unwrap();
        assert_eq!(res.labeled.len(), 10);
        let per_class_0 = res.labeled.iter().filter(|&&i| m.records[i].labels[0] == 0).count();
        assert_eq!(per_class_0, 5);
        assert_eq!(res.labeled.len() + res.unlabeled.len(), 100);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let m = manifest_with_classes(&[33, 17, 25]);
        for seed in 0..5 {
            let spec = SplitSpec {
                strategy: SplitStrategy::Stratified { labeled_fraction: 0.2 },
                seed,
            };
            let a = split(&m, &spec).unwrap();
            let b = split(&m, &spec).unwrap();
            assert_eq!(a, b);
            let mut all: Vec<usize> = a.labeled.iter().chain(a.unlabeled.iter()).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..m.records.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn stratification_proportionality_bound() {
        let m = manifest_with_classes(&[31, 14, 55, 9]);
        let frac = 0.3;
        let spec = SplitSpec {
            strategy: SplitStrategy::Stratified { labeled_fraction: frac },
            seed: 11,
        };
        let res = split(&m, &spec).unwrap();
        for (c, &total) in [31usize, 14, 55, 9].iter().enumerate() {
            let got = res.labeled.iter().filter(|&&i| m.records[i].labels[0] == c).count() as f64;
            assert!((got - (frac * total as f64).round()).abs() <= 1.0);
        }
    }

    #[test]
    fn exact_per_class_matches_request() {
        let m = manifest_with_classes(&[12; 10]);
        let spec = SplitSpec {
            strategy: SplitStrategy::ExactPerClass { n: 10 },
            seed: 0,
        };
        let res = split(&m, &spec).unwrap();
        assert_eq!(res.labeled.len(), 100);
        for c in 0..10 {
            assert_eq!(
                res.labeled.iter().filter(|&&i| m.records[i].labels[0] == c).count(),
                10
            );
        }
    }

    #[test]
    fn infeasible_split_is_an_error() {
        let m = manifest_with_classes(&[3, 2]);
        let spec = SplitSpec {
            strategy: SplitStrategy::ExactPerClass { n: 5 },
            seed: 0,
        };
        assert!(matches!(split(&m, &spec), Err(Error::InfeasibleSplit(_))));
    }
}
