//! Weak/strong image augmentation.
//!
//! Augmentation randomness is keyed by `(sample id, branch, step seed)`, so a
//! given view is reproducible regardless of worker scheduling or of what else
//! consumed randomness. Labels and metadata pass through untouched.

use super::Sample;
use crate::error::{Error, Result};
use crate::rng;
use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    Weak,
    Strong,
}

const FILL: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ImageTransform {
    HorizontalFlip { p: f64 },
    /// Shift by up to `max_fraction` of the side length, fill with gray.
    Translate { max_fraction: f64 },
    /// Per-channel affine jitter: scale in [1-scale, 1+scale], shift in
    /// [-shift, shift].
    ColorJitter { scale: f64, shift: f64 },
    /// One gray rectangle covering a side fraction in [min_fraction, max_fraction].
    Occlude { min_fraction: f64, max_fraction: f64 },
}

impl ImageTransform {
    /// Every transform draws a fixed number of values so later transforms see
    /// the same stream position whether or not this one fired.
    fn apply(&self, img: &mut Array3<f64>, rng: &mut impl Rng) {
        let (h, w, c) = img.dim();
        match self {
            ImageTransform::HorizontalFlip { p } => {
                let u: f64 = rng.random();
                if u < *p {
                    for y in 0..h {
                        for x in 0..w / 2 {
                            for ch in 0..c {
                                img.swap([y, x, ch], [y, w - 1 - x, ch]);
                            }
                        }
                    }
                }
            }
            ImageTransform::Translate { max_fraction } => {
                let m = (max_fraction * w as f64).floor() as i64;
                let dx = rng.random_range(-m..=m);
                let dy = rng.random_range(-m..=m);
                if dx == 0 && dy == 0 {
                    return;
                }
                let src = img.clone();
                for y in 0..h as i64 {
                    for x in 0..w as i64 {
                        let (sy, sx) = (y - dy, x - dx);
                        for ch in 0..c {
                            img[[y as usize, x as usize, ch]] =
                                if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                                    src[[sy as usize, sx as usize, ch]]
                                } else {
                                    FILL
                                };
                        }
                    }
                }
            }
            ImageTransform::ColorJitter { scale, shift } => {
                for ch in 0..c {
                    let s = 1.0 + rng.random_range(-scale..=*scale);
                    let b = rng.random_range(-shift..=*shift);
                    for y in 0..h {
                        for x in 0..w {
                            let v = img[[y, x, ch]] * s + b;
                            img[[y, x, ch]] = v.clamp(0.0, 1.0);
                        }
                    }
                }
            }
            ImageTransform::Occlude { min_fraction, max_fraction } => {
                let f = rng.random_range(*min_fraction..=*max_fraction);
                let bw = ((f * w as f64).round() as usize).clamp(1, w);
                let bh = ((f * h as f64).round() as usize).clamp(1, h);
                let x0 = rng.random_range(0..=(w - bw));
                let y0 = rng.random_range(0..=(h - bh));
                for y in y0..y0 + bh {
                    for x in x0..x0 + bw {
                        for ch in 0..c {
                            img[[y, x, ch]] = FILL;
                        }
                    }
                }
            }
        }
    }
}

/// Ordered transform lists for the two branches. The strong list must extend
/// the weak list (the weak policy is a prefix), which encodes the contract
/// that strong augmentation only adds distortion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub weak: Vec<ImageTransform>,
    pub strong: Vec<ImageTransform>,
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.strong.len() < self.weak.len()
            || self.strong[..self.weak.len()] != self.weak[..]
        {
            return Err(Error::InvalidConfig(
                "strong transform list must start with the weak list".into(),
            ));
        }
        Ok(())
    }

    /// No-op policy on both branches.
    pub fn identity() -> Self {
        AugmentationPolicy {
            weak: Vec::new(),
            strong: Vec::new(),
        }
    }

    fn transforms(&self, branch: Branch) -> &[ImageTransform] {
        match branch {
            Branch::Weak => &self.weak,
            Branch::Strong => &self.strong,
        }
    }
}

impl Default for AugmentationPolicy {
    /// Weak: horizontal flip + small translation. Strong: the same plus color
    /// jitter and one occlusion rectangle.
    fn default() -> Self {
        let weak = vec![
            ImageTransform::HorizontalFlip { p: 0.5 },
            ImageTransform::Translate { max_fraction: 0.125 },
        ];
        let mut strong = weak.clone();
        strong.push(ImageTransform::ColorJitter { scale: 0.4, shift: 0.1 });
        strong.push(ImageTransform::Occlude { min_fraction: 0.2, max_fraction: 0.4 });
        AugmentationPolicy { weak, strong }
    }
}

/// Produce one augmented view. Deterministic in `(sample.id, branch,
/// step_seed)`; the label and metadata are returned unchanged and the output
/// image stays in [0, 1].
///
/// Both branches draw from one per-(sample, step) stream and the strong list
/// extends the weak list, so the strong view is the weak view with extra
/// distortion applied on top.
pub fn augment(
    policy: &AugmentationPolicy,
    sample: &Sample,
    branch: Branch,
    step_seed: u64,
) -> Sample {
    let mut rng = rng::stream(step_seed, "augment", &[rng::hash_str(&sample.id)]);
    let mut img = sample.image.clone();
    for t in policy.transforms(branch) {
        t.apply(&mut img, &mut rng);
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Sample {
        id: sample.id.clone(),
        image: img,
        label: sample.label.clone(),
        meta: sample.meta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{GeoTemporal, Label};
    use ndarray::Array3;

    fn sample(seed: u64) -> Sample {
        let mut rng = crate::rng::stream(seed, "augtest", &[]);
        Sample {
            id: format!("s{seed}"),
            image: Array3::from_shape_fn((16, 16, 3), |_| rng.random()),
            label: Some(Label::Class(2)),
            meta: GeoTemporal {
                latitude: 48.1,
                longitude: 11.6,
                day_of_year: Some(172.0),
            },
        }
    }

    #[test]
    fn identity_policy_is_bitwise_noop() {
        let s = sample(1);
        let out = augment(&AugmentationPolicy::identity(), &s, Branch::Strong, 7);
        assert_eq!(out.image, s.image);
    }

    #[test]
    fn same_key_same_view() {
        let s = sample(2);
        let p = AugmentationPolicy::default();
        let a = augment(&p, &s, Branch::Strong, 42);
        let b = augment(&p, &s, Branch::Strong, 42);
        assert_eq!(a.image, b.image);
        let c = augment(&p, &s, Branch::Strong, 43);
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn label_and_metadata_pass_through() {
        let p = AugmentationPolicy::default();
        for seed in 0..200 {
            let s = sample(seed);
            for branch in [Branch::Weak, Branch::Strong] {
                let out = augment(&p, &s, branch, seed ^ 0xabcd);
                assert_eq!(out.label, s.label);
                assert_eq!(out.meta, s.meta);
                assert_eq!(out.id, s.id);
                assert!(out.image.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn strong_branch_distorts_more_on_average() {
        // Oracle: measure mean absolute pixel change per branch on a probe set.
        let p = AugmentationPolicy::default();
        let (mut weak_change, mut strong_change) = (0.0, 0.0);
        for seed in 0..100 {
            let s = sample(seed + 1000);
            let w = augment(&p, &s, Branch::Weak, seed);
            let g = augment(&p, &s, Branch::Strong, seed);
            weak_change += (&w.image - &s.image).mapv(f64::abs).mean().unwrap();
            strong_change += (&g.image - &s.image).mapv(f64::abs).mean().unwrap();
        }
        assert!(
            strong_change > weak_change,
            "strong {strong_change} <= weak {weak_change}"
        );
    }

    #[test]
    fn weak_must_prefix_strong() {
        let bad = AugmentationPolicy {
            weak: vec![ImageTransform::HorizontalFlip { p: 0.5 }],
            strong: vec![ImageTransform::Occlude { min_fraction: 0.1, max_fraction: 0.2 }],
        };
        assert!(bad.validate().is_err());
        assert!(AugmentationPolicy::default().validate().is_ok());
        assert!(AugmentationPolicy::identity().validate().is_ok());
    }
}
