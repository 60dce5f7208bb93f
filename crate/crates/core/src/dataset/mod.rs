//! Dataset ingestion, synthetic world generation, splits, augmentation, and
//! batch assembly.

mod augment;
mod batch;
mod manifest;
mod split;
mod synthetic;

pub use augment::{augment, AugmentationPolicy, Branch, ImageTransform};
pub use batch::{Batch, BatchConfig, BatchSample, BatchStream, StreamState};
pub use manifest::{
    load_manifest, save_manifest, DatasetManifest, DatasetSidecar, LoadedDataset, ManifestRecord,
    MetadataBaselineNote,
};
pub use split::{split, split_indices, SplitResult, SplitSpec, SplitStrategy};
pub use synthetic::{generate_synthetic, synthesize_records, SamplingBias, SyntheticWorldConfig};

use crate::error::{Error, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// Single-label (softmax) or multi-label (per-class sigmoid) classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskMode {
    SingleLabel,
    MultiLabel,
}

/// Geolocation and acquisition time of one image. The day of the year may be
/// absent (some datasets carry no timestamps); absence is preserved, not
/// encoded as zero, since day 0 is a valid winter day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTemporal {
    /// Degrees in [-90, 90].
    pub latitude: f64,
    /// Degrees in [-180, 180].
    pub longitude: f64,
    /// Real-valued day in [0, 366), or `None` when unavailable.
    pub day_of_year: Option<f64>,
}

impl GeoTemporal {
    pub fn new(latitude: f64, longitude: f64, day_of_year: Option<f64>) -> Result<Self> {
        let gt = GeoTemporal {
            latitude,
            longitude,
            day_of_year,
        };
        gt.validate()?;
        Ok(gt)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.latitude.is_finite() || !(-90.0..=90.0).contains(&self.latitude) {
            return Err(Error::InvalidConfig(format!(
                "latitude {} outside [-90, 90]",
                self.latitude
            )));
        }
        if !self.longitude.is_finite() || !(-180.0..=180.0).contains(&self.longitude) {
            return Err(Error::InvalidConfig(format!(
                "longitude {} outside [-180, 180]",
                self.longitude
            )));
        }
        if let Some(d) = self.day_of_year {
            if !d.is_finite() || !(0.0..366.0).contains(&d) {
                return Err(Error::InvalidConfig(format!(
                    "day_of_year {d} outside [0, 366)"
                )));
            }
        }
        Ok(())
    }
}

/// Ground-truth annotation of a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    /// Class index, single-label mode.
    Class(usize),
    /// Per-class {0,1} indicators, multi-label mode.
    MultiHot(Vec<u8>),
}

impl Label {
    pub fn validate(&self, task_mode: TaskMode, num_classes: usize) -> Result<()> {
        match (self, task_mode) {
            (Label::Class(c), TaskMode::SingleLabel) => {
                if *c >= num_classes {
                    return Err(Error::InvalidConfig(format!(
                        "class index {c} >= num_classes {num_classes}"
                    )));
                }
            }
            (Label::MultiHot(v), TaskMode::MultiLabel) => {
                if v.len() != num_classes {
                    return Err(Error::InvalidConfig(format!(
                        "multi-hot length {} != num_classes {num_classes}",
                        v.len()
                    )));
                }
                if v.iter().any(|&b| b > 1) {
                    return Err(Error::InvalidConfig(
                        "multi-hot entries must be 0 or 1".into(),
                    ));
                }
            }
            _ => {
                return Err(Error::InvalidConfig(
                    "label kind does not match task mode".into(),
                ))
            }
        }
        Ok(())
    }

    /// Dense {0,1} target vector of length `num_classes` (one-hot for
    /// single-label).
    pub fn to_dense(&self, num_classes: usize) -> Vec<f64> {
        let mut v = vec![0.0; num_classes];
        match self {
            Label::Class(c) => v[*c] = 1.0,
            Label::MultiHot(bits) => {
                for (i, &b) in bits.iter().enumerate() {
                    v[i] = f64::from(b);
                }
            }
        }
        v
    }
}

/// One image with its optional annotation and metadata — the unit flowing
/// through the pipeline. Pixel values are reals in [0, 1], layout (H, W, C).
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Array3<f64>,
    pub label: Option<Label>,
    pub meta: GeoTemporal,
}
