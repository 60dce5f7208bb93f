//! Metrics, pseudo-label quality tracking, OOD-metadata evaluation, and the
//! spatiotemporal prior probe.

mod ap;
mod meta_baseline;
mod ood;
mod probe;

pub use ap::{average_precision, mean_average_precision};
pub use meta_baseline::{evaluate_metadata_baseline, BaselineResult};
pub use ood::{ood_metadata_eval, verify_ood, OodReport, OodRow, OverrideSpec};
pub use probe::{prior_probe, ProbeConfig, ProbePoint, ProbeResult};

use crate::autodiff::Graph;
use crate::dataset::{Label, LoadedDataset, TaskMode};
use crate::error::{Error, Result};
use crate::model::{forward, BackboneConfig, MetaMask, ParamBinding, ParamSnapshot};
use crate::ssl::{PseudoBatch, PseudoWeights};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

/// Evaluation summary. All values live in [0, 1]; `map` is the macro mean of
/// the per-class APs that exist.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: Option<f64>,
    pub map: f64,
    pub per_class_ap: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_quality: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_quantity: Option<f64>,
}

/// Pseudo-label quantity (fraction of α-passing slots) and quality (accuracy
/// among the passing slots; absent when nothing passes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoStats {
    pub quantity: f64,
    pub quality: Option<f64>,
}

pub fn pseudo_stats(pseudo: &PseudoBatch, ground_truth: &[Label]) -> Result<PseudoStats> {
    if ground_truth.len() != pseudo.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} ground-truth labels for pseudo batch of {}",
            ground_truth.len(),
            pseudo.len()
        )));
    }
    let k = pseudo.targets.ncols();
    let (mut passing, mut correct, mut total) = (0usize, 0usize, 0usize);
    match &pseudo.weights {
        PseudoWeights::PerSample(alpha) => {
            for (i, gt) in ground_truth.iter().enumerate() {
                total += 1;
                if alpha[i] > 0.0 {
                    passing += 1;
                    let pred = (0..k)
                        .max_by(|&a, &b| pseudo.targets[[i, a]].total_cmp(&pseudo.targets[[i, b]]))
                        .unwrap();
                    let truth = match gt {
                        Label::Class(c) => *c,
                        Label::MultiHot(_) => {
                            return Err(Error::InvalidConfig(
                                "per-sample pseudo labels need single-label ground truth".into(),
                            ))
                        }
                    };
                    if pred == truth {
                        correct += 1;
                    }
                }
            }
        }
        PseudoWeights::PerSampleClass(alpha) => {
            for (i, gt) in ground_truth.iter().enumerate() {
                let bits = match gt {
                    Label::MultiHot(b) => b.clone(),
                    Label::Class(c) => {
                        let mut b = vec![0u8; k];
                        b[*c] = 1;
                        b
                    }
                };
                for c in 0..k {
                    total += 1;
                    if alpha[[i, c]] > 0.0 {
                        passing += 1;
                        if pseudo.targets[[i, c]] == f64::from(bits[c]) {
                            correct += 1;
                        }
                    }
                }
            }
        }
    }
    let quantity = if total == 0 { 0.0 } else { passing as f64 / total as f64 };
    let quality = (passing > 0).then(|| correct as f64 / passing as f64);
    Ok(PseudoStats { quantity, quality })
}

/// Class-membership scores for a batch of images under a frozen snapshot:
/// softmax probabilities (single-label) or per-class sigmoids (multi-label).
pub fn score_batch(
    config: &BackboneConfig,
    params: &ParamSnapshot,
    images: ArrayD<f64>,
    metas: Option<&[crate::dataset::GeoTemporal]>,
    mask: &MetaMask,
) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let binding = ParamBinding::bind(&mut g, params, false);
    let img = g.constant(images);
    let out = forward(&mut g, config, params, &binding, img, metas, mask)?;
    let probs = match config.task_mode {
        TaskMode::SingleLabel => g.softmax_last(out.logits),
        TaskMode::MultiLabel => g.sigmoid(out.logits),
    };
    Ok(g.value(probs)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-d probabilities")
        .to_owned())
}

const EVAL_BATCH: usize = 64;

/// Deterministic, batch-size-independent evaluation of a snapshot over a
/// dataset split. Every index must carry a label. Teacher variants read the
/// per-record metadata; `meta_override` substitutes it wholesale when given.
pub fn evaluate(
    config: &BackboneConfig,
    params: &ParamSnapshot,
    data: &LoadedDataset,
    indices: &[usize],
    mask: &MetaMask,
    meta_override: Option<&dyn Fn(&crate::dataset::GeoTemporal) -> crate::dataset::GeoTemporal>,
) -> Result<MetricsReport> {
    if indices.is_empty() {
        return Err(Error::InvalidConfig("empty evaluation split".into()));
    }
    let k = config.num_classes;
    let n = indices.len();
    let mut scores = Array2::<f64>::zeros((n, k));
    let mut targets = Array2::<bool>::from_elem((n, k), false);
    let mut correct = 0usize;

    for (chunk_idx, chunk) in indices.chunks(EVAL_BATCH).enumerate() {
        let chunk_start = chunk_idx * EVAL_BATCH;
        let s = config.image_size;
        let mut images = ArrayD::<f64>::zeros(IxDyn(&[chunk.len(), s, s, 3]));
        let mut metas = Vec::with_capacity(chunk.len());
        for (j, &idx) in chunk.iter().enumerate() {
            images
                .index_axis_mut(Axis(0), j)
                .assign(&data.image(idx).view().into_dyn());
            let m = data.manifest.records[idx].meta;
            metas.push(match meta_override {
                Some(f) => f(&m),
                None => m,
            });
        }
        let probs = score_batch(config, params, images, Some(&metas), mask)?;
        for (j, &idx) in chunk.iter().enumerate() {
            let label = data.manifest.records[idx]
                .label(data.manifest.task_mode, k)
                .ok_or_else(|| {
                    Error::InvalidConfig(format!("evaluation sample {idx} has no label"))
                })?;
            let dense = label.to_dense(k);
            for c in 0..k {
                scores[[chunk_start + j, c]] = probs[[j, c]];
                targets[[chunk_start + j, c]] = dense[c] > 0.5;
            }
            if let Label::Class(truth) = label {
                let pred = (0..k)
                    .max_by(|&a, &b| probs[[j, a]].total_cmp(&probs[[j, b]]))
                    .unwrap();
                if pred == truth {
                    correct += 1;
                }
            }
        }
    }

    let (per_class_ap, map) = mean_average_precision(&scores, &targets)?;
    let accuracy = match config.task_mode {
        TaskMode::SingleLabel => Some(correct as f64 / n as f64),
        TaskMode::MultiLabel => None,
    };
    Ok(MetricsReport {
        accuracy,
        map,
        per_class_ap,
        pseudo_quality: None,
        pseudo_quantity: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssl::PseudoSource;
    use ndarray::{arr1, arr2};

    #[test]
    fn pseudo_stats_empty_mask() {
        let pb = PseudoBatch {
            targets: arr2(&[[1.0, 0.0], [0.0, 1.0]]),
            weights: PseudoWeights::PerSample(arr1(&[0.0, 0.0])),
            source: PseudoSource::Teacher,
        };
        let gt = vec![Label::Class(0), Label::Class(1)];
        let s = pseudo_stats(&pb, &gt).unwrap();
        assert_eq!(s.quantity, 0.0);
        assert_eq!(s.quality, None);
    }

    #[test]
    fn pseudo_stats_perfect() {
        let pb = PseudoBatch {
            targets: arr2(&[[1.0, 0.0], [0.0, 1.0]]),
            weights: PseudoWeights::PerSample(arr1(&[1.0, 1.0])),
            source: PseudoSource::Teacher,
        };
        let gt = vec![Label::Class(0), Label::Class(1)];
        let s = pseudo_stats(&pb, &gt).unwrap();
        assert_eq!(s.quantity, 1.0);
        assert_eq!(s.quality, Some(1.0));
    }

    #[test]
    fn pseudo_stats_mixed_hand_count() {
        // 10 slots (5 samples x 2 classes), 6 passing, 3 of them correct.
        let targets = arr2(&[
            [1.0, 0.0],
            [1.0, 1.0],
            [0.0, 0.0],
            [0.0, 1.0],
            [1.0, 0.0],
        ]);
        let alpha = arr2(&[
            [1.0, 1.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [1.0, 0.0],
            [1.0, 0.0],
        ]);
        let gt = vec![
            Label::MultiHot(vec![1, 1]), // slot (0,0) correct, (0,1) wrong
            Label::MultiHot(vec![1, 0]), // (1,0) correct
            Label::MultiHot(vec![0, 0]), // (2,1) wrong (target 0 == gt 0: correct)
            Label::MultiHot(vec![1, 1]), // (3,0) wrong
            Label::MultiHot(vec![0, 1]), // (4,0) wrong
        ];
        let pb = PseudoBatch {
            targets,
            weights: PseudoWeights::PerSampleClass(alpha),
            source: PseudoSource::SelfModel,
        };
        let s = pseudo_stats(&pb, &gt).unwrap();
        // Passing slots: (0,0)+, (0,1)-, (1,0)+, (2,1)+, (3,0)-, (4,0)-.
        assert!((s.quantity - 0.6).abs() < 1e-12);
        assert!((s.quality.unwrap() - 0.5).abs() < 1e-12);
    }
}
