//! Vision-transformer backbones and the spatiotemporal metadata encoder.
//!
//! Three token configurations share one implementation: the teacher carries a
//! metatoken produced by a two-layer MLP over normalized (lat, lon, day), the
//! student carries a learned distillation token, and the plain variant has
//! neither. The late-fusion ablation keeps metadata out of attention and adds
//! the encoded metadata to the final classification embedding instead.

mod params;
mod vit;

pub use params::{expected_param_names, init_params, param_count, ParamBinding, ParamSnapshot};
pub use vit::{forward, ModelOutputs};

use crate::dataset::{GeoTemporal, TaskMode};
use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Metadata-consuming pseudo-label generator.
    Teacher,
    /// Metadata-free deployed model with a distillation token.
    Student,
    /// No extra tokens; the baseline architecture.
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// Metatoken joins the token sequence before the transformer blocks.
    #[serde(rename = "early-metatoken")]
    Early,
    /// Encoded metadata is added to the final classification embedding.
    #[serde(rename = "late-fusion")]
    Late,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub task_mode: TaskMode,
    pub variant: Variant,
    pub fusion: Fusion,
    /// Substitute for the normalized day of year when acquisition time is
    /// absent (mid-year is the least informative constant).
    #[serde(default = "default_day_fill")]
    pub day_fill: f64,
    /// Encode the day as (sin, cos) of its phase instead of a plain scalar.
    /// Off by default: the scalar encoding keeps far out-of-distribution day
    /// values impossible by construction.
    #[serde(default)]
    pub cyclic_day: bool,
}

fn default_day_fill() -> f64 {
    0.5
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.depth == 0 || self.num_classes == 0 || self.mlp_ratio <= 0.0 {
            return Err(Error::InvalidConfig(
                "depth, num_classes, mlp_ratio must be positive".into(),
            ));
        }
        match self.variant {
            Variant::Teacher => {
                if self.fusion == Fusion::None {
                    return Err(Error::InvalidConfig(
                        "teacher requires early-metatoken or late-fusion".into(),
                    ));
                }
            }
            Variant::Student | Variant::Plain => {
                if self.fusion != Fusion::None {
                    return Err(Error::InvalidConfig(format!(
                        "{:?} variant cannot use metadata fusion",
                        self.variant
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Extra (non-patch) tokens in the sequence.
    pub fn num_special_tokens(&self) -> usize {
        match (self.variant, self.fusion) {
            (Variant::Teacher, Fusion::Early) => 2, // cls + metatoken
            (Variant::Student, _) => 2,             // cls + distillation token
            _ => 1,                                 // cls only
        }
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches() + self.num_special_tokens()
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn has_meta_encoder(&self) -> bool {
        matches!(self.fusion, Fusion::Early | Fusion::Late)
    }

    pub fn meta_input_width(&self) -> usize {
        if self.cyclic_day {
            4
        } else {
            3
        }
    }
}

/// Which metadata components the teacher sees (ablation switches). Masked
/// components are replaced by their least-informative constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaMask {
    pub use_geo: bool,
    pub use_time: bool,
}

impl Default for MetaMask {
    fn default() -> Self {
        MetaMask { use_geo: true, use_time: true }
    }
}

/// Divisor that maps a day of year onto [0, 1).
pub const DAY_NORM: f64 = 365.25;

/// Normalize one metadata record to (lat/90, lon/180, day/365.25). An absent
/// day becomes `day_fill`; days in the leap tail are clamped just below 1.
pub fn normalize_metadata(meta: &GeoTemporal, day_fill: f64) -> [f64; 3] {
    let day = match meta.day_of_year {
        Some(d) => (d / DAY_NORM).min(1.0 - f64::EPSILON),
        None => day_fill,
    };
    [meta.latitude / 90.0, meta.longitude / 180.0, day]
}

/// Encoder input rows for a batch of metadata records, with masking and the
/// optional cyclic day encoding applied.
pub fn meta_features(
    config: &BackboneConfig,
    mask: &MetaMask,
    metas: &[GeoTemporal],
) -> Array2<f64> {
    let width = config.meta_input_width();
    let mut out = Array2::<f64>::zeros((metas.len(), width));
    for (i, m) in metas.iter().enumerate() {
        let [lat, lon, day] = normalize_metadata(m, config.day_fill);
        let (lat, lon) = if mask.use_geo { (lat, lon) } else { (0.0, 0.0) };
        let day = if mask.use_time { day } else { config.day_fill };
        out[[i, 0]] = lat;
        out[[i, 1]] = lon;
        if config.cyclic_day {
            let phase = 2.0 * std::f64::consts::PI * day;
            out[[i, 2]] = phase.sin();
            out[[i, 3]] = phase.cos();
        } else {
            out[[i, 2]] = day;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_zero_is_zero() {
        let m = GeoTemporal { latitude: 0.0, longitude: 0.0, day_of_year: Some(0.0) };
        assert_eq!(normalize_metadata(&m, 0.5), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_hand_computed() {
        let m = GeoTemporal { latitude: 48.1, longitude: 11.6, day_of_year: Some(172.0) };
        let [lat, lon, day] = normalize_metadata(&m, 0.5);
        assert!((lat - 0.5344444444444445).abs() < 1e-12);
        assert!((lon - 0.06444444444444444).abs() < 1e-12);
        assert!((day - 0.4709103353867215).abs() < 1e-12);
    }

    #[test]
    fn absent_day_uses_fill() {
        let m = GeoTemporal { latitude: -45.0, longitude: 90.0, day_of_year: None };
        let [lat, lon, day] = normalize_metadata(&m, 0.5);
        assert_eq!([lat, lon, day], [-0.5, 0.5, 0.5]);
    }

    #[test]
    fn leap_tail_days_stay_below_one() {
        let m = GeoTemporal { latitude: 0.0, longitude: 0.0, day_of_year: Some(365.9) };
        let [_, _, day] = normalize_metadata(&m, 0.5);
        assert!(day < 1.0);
    }

    #[test]
    fn masking_replaces_components() {
        let cfg = BackboneConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            num_heads: 2,
            mlp_ratio: 2.0,
            num_classes: 3,
            task_mode: crate::dataset::TaskMode::SingleLabel,
            variant: Variant::Teacher,
            fusion: Fusion::Early,
            day_fill: 0.5,
            cyclic_day: false,
        };
        let metas = [GeoTemporal { latitude: 45.0, longitude: -90.0, day_of_year: Some(100.0) }];
        let no_geo = meta_features(&cfg, &MetaMask { use_geo: false, use_time: true }, &metas);
        assert_eq!(no_geo[[0, 0]], 0.0);
        assert_eq!(no_geo[[0, 1]], 0.0);
        assert!(no_geo[[0, 2]] > 0.0);
        let no_time = meta_features(&cfg, &MetaMask { use_geo: true, use_time: false }, &metas);
        assert_eq!(no_time[[0, 2]], 0.5);
        assert!(no_time[[0, 0]] != 0.0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = BackboneConfig {
            image_size: 9,
            patch_size: 4,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
            num_classes: 3,
            task_mode: crate::dataset::TaskMode::SingleLabel,
            variant: Variant::Plain,
            fusion: Fusion::None,
            day_fill: 0.5,
            cyclic_day: false,
        };
        assert!(cfg.validate().is_err()); // 9 % 4 != 0
        cfg.image_size = 8;
        assert!(cfg.validate().is_ok());
        cfg.variant = Variant::Teacher;
        assert!(cfg.validate().is_err()); // teacher needs fusion
        cfg.fusion = Fusion::Early;
        assert!(cfg.validate().is_ok());
        cfg.variant = Variant::Student;
        assert!(cfg.validate().is_err()); // student cannot fuse metadata
    }
}
