//! Metadata-only logistic baseline.
//!
//! Measures how much label information the metadata alone carries: a
//! multinomial logistic regression over simple spatiotemporal features
//! (normalized coordinates, day harmonics, a coarse location tiling),
//! compared against the majority-class predictor. Used to annotate generated
//! datasets and as the oracle for the dependence-strength properties.

use crate::dataset::GeoTemporal;
use crate::error::{Error, Result};
use crate::model::normalize_metadata;
use ndarray::{Array1, Array2};

const TILES: usize = 4;
const GD_ITERS: usize = 300;
const GD_LR: f64 = 0.5;

fn features(meta: &GeoTemporal, bbox: &BBox) -> Vec<f64> {
    let [lat_n, lon_n, day_n] = normalize_metadata(meta, 0.5);
    let mut f = Vec::with_capacity(5 + TILES * TILES);
    f.push(lat_n);
    f.push(lon_n);
    f.push(day_n);
    let phase = 2.0 * std::f64::consts::PI * day_n;
    f.push(phase.sin());
    f.push(phase.cos());
    let fx = ((meta.longitude - bbox.lon_min) / (bbox.lon_max - bbox.lon_min).max(1e-9))
        .clamp(0.0, 1.0 - 1e-12);
    let fy = ((meta.latitude - bbox.lat_min) / (bbox.lat_max - bbox.lat_min).max(1e-9))
        .clamp(0.0, 1.0 - 1e-12);
    let tile = (fy * TILES as f64) as usize * TILES + (fx * TILES as f64) as usize;
    for t in 0..TILES * TILES {
        f.push(if t == tile { 1.0 } else { 0.0 });
    }
    f
}

struct BBox {
    lat_min: f64,
    lat_max: f64,
    lon_min: f64,
    lon_max: f64,
}

fn bbox_of(pairs: &[(GeoTemporal, usize)]) -> BBox {
    let mut b = BBox {
        lat_min: f64::INFINITY,
        lat_max: f64::NEG_INFINITY,
        lon_min: f64::INFINITY,
        lon_max: f64::NEG_INFINITY,
    };
    for (m, _) in pairs {
        b.lat_min = b.lat_min.min(m.latitude);
        b.lat_max = b.lat_max.max(m.latitude);
        b.lon_min = b.lon_min.min(m.longitude);
        b.lon_max = b.lon_max.max(m.longitude);
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineResult {
    /// Held-out accuracy of the metadata-only logistic predictor.
    pub baseline_accuracy: f64,
    /// Held-out accuracy of always predicting the most frequent class.
    pub majority_accuracy: f64,
}

impl BaselineResult {
    pub fn advantage(&self) -> f64 {
        self.baseline_accuracy - self.majority_accuracy
    }
}

/// Fit on the first 75% of the pairs, evaluate both predictors on the rest.
/// Deterministic: full-batch gradient descent from zero weights.
pub fn evaluate_metadata_baseline(
    pairs: &[(GeoTemporal, usize)],
    num_classes: usize,
) -> Result<BaselineResult> {
    if pairs.len() < 8 {
        return Err(Error::InvalidConfig(
            "metadata baseline needs at least 8 samples".into(),
        ));
    }
    let split = pairs.len() * 3 / 4;
    let (train, test) = pairs.split_at(split);
    let bbox = bbox_of(train);

    let dim = features(&train[0].0, &bbox).len();
    let x_train = Array2::from_shape_fn((train.len(), dim), |(i, j)| features(&train[i].0, &bbox)[j]);
    let y_train: Vec<usize> = train.iter().map(|(_, c)| *c).collect();

    // Multinomial logistic regression, full-batch GD.
    let mut w = Array2::<f64>::zeros((dim, num_classes));
    let mut b = Array1::<f64>::zeros(num_classes);
    let n = train.len() as f64;
    for _ in 0..GD_ITERS {
        let logits = x_train.dot(&w) + &b;
        let mut probs = logits;
        for mut row in probs.rows_mut() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        for (i, &c) in y_train.iter().enumerate() {
            probs[[i, c]] -= 1.0;
        }
        let gw = x_train.t().dot(&probs) / n;
        let gb = probs.sum_axis(ndarray::Axis(0)) / n;
        w -= &(GD_LR * &gw);
        b -= &(GD_LR * &gb);
    }

    let mut counts = vec![0usize; num_classes];
    for &c in &y_train {
        counts[c] += 1;
    }
    let majority_class = (0..num_classes).max_by_key(|&c| counts[c]).unwrap();

    let mut correct = 0usize;
    let mut majority_correct = 0usize;
    for (m, c) in test {
        let f = Array1::from_vec(features(m, &bbox));
        let logits = f.dot(&w) + &b;
        let pred = (0..num_classes)
            .max_by(|&a, &bb| logits[a].total_cmp(&logits[bb]))
            .unwrap();
        if pred == *c {
            correct += 1;
        }
        if majority_class == *c {
            majority_correct += 1;
        }
    }
    Ok(BaselineResult {
        baseline_accuracy: correct as f64 / test.len() as f64,
        majority_accuracy: majority_correct as f64 / test.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize_records, SyntheticWorldConfig};

    fn world(sg: f64, st: f64, n: usize) -> Vec<(GeoTemporal, usize)> {
        let cfg = SyntheticWorldConfig {
            num_classes: 6,
            num_regions: 9,
            image_size: 8,
            samples_total: n,
            spatial_dependence_strength: sg,
            seasonal_dependence_strength: st,
            sampling_bias: None,
            label_noise: 0.0,
            seed: 77,
        };
        synthesize_records(&cfg)
            .unwrap()
            .into_iter()
            .map(|(r, _)| (r.meta, r.labels[0]))
            .collect()
    }

    #[test]
    fn independent_world_gives_no_advantage() {
        let res = evaluate_metadata_baseline(&world(0.0, 0.0, 3000), 6).unwrap();
        assert!(
            res.advantage() < 0.05,
            "advantage {} on an independent world",
            res.advantage()
        );
    }

    #[test]
    fn dependent_world_gives_clear_advantage() {
        let res = evaluate_metadata_baseline(&world(0.8, 0.8, 3000), 6).unwrap();
        assert!(
            res.advantage() >= 0.15,
            "advantage {} below 15 points",
            res.advantage()
        );
    }
}
