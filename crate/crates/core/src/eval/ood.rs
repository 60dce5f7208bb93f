//! Evaluation under out-of-distribution metadata substitution.

use super::{evaluate, MetricsReport};
use crate::dataset::{GeoTemporal, LoadedDataset};
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, MetaMask, ParamSnapshot};
use serde::{Deserialize, Serialize};

/// One fixed metadata override applied to every test sample: either the
/// location or the acquisition day is replaced, the other component keeps its
/// true value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OverrideSpec {
    Location { lat: f64, lon: f64 },
    Time { day: f64 },
}

impl OverrideSpec {
    pub fn apply(&self, meta: &GeoTemporal) -> GeoTemporal {
        match *self {
            OverrideSpec::Location { lat, lon } => GeoTemporal {
                latitude: lat,
                longitude: lon,
                day_of_year: meta.day_of_year,
            },
            OverrideSpec::Time { day } => GeoTemporal {
                latitude: meta.latitude,
                longitude: meta.longitude,
                day_of_year: Some(day),
            },
        }
    }
}

/// Check that every override lies outside the support (bounding box / day
/// range) of the given training records.
pub fn verify_ood(
    train_metas: &[GeoTemporal],
    overrides: &[OverrideSpec],
) -> Result<()> {
    if overrides.is_empty() {
        return Err(Error::InvalidConfig("empty substitution list".into()));
    }
    let (mut lat_min, mut lat_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut lon_min, mut lon_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut day_min, mut day_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for m in train_metas {
        lat_min = lat_min.min(m.latitude);
        lat_max = lat_max.max(m.latitude);
        lon_min = lon_min.min(m.longitude);
        lon_max = lon_max.max(m.longitude);
        if let Some(d) = m.day_of_year {
            day_min = day_min.min(d);
            day_max = day_max.max(d);
        }
    }
    for o in overrides {
        let inside = match *o {
            OverrideSpec::Location { lat, lon } => {
                (lat_min..=lat_max).contains(&lat) && (lon_min..=lon_max).contains(&lon)
            }
            OverrideSpec::Time { day } => (day_min..=day_max).contains(&day),
        };
        if inside {
            return Err(Error::InvalidConfig(format!(
                "override {o:?} lies inside the training metadata support"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OodRow {
    pub spec: OverrideSpec,
    pub teacher: MetricsReport,
    pub student: MetricsReport,
}

/// Table-style report: baselines on true metadata, one row per override, and
/// the mean ± standard deviation of the teacher's metrics across overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OodReport {
    pub teacher_baseline: MetricsReport,
    pub student_baseline: MetricsReport,
    pub rows: Vec<OodRow>,
    pub teacher_map_mean: f64,
    pub teacher_map_std: f64,
    pub teacher_accuracy_mean: Option<f64>,
    pub teacher_accuracy_std: Option<f64>,
    /// Bitwise equality of the student's scores across all overrides.
    pub student_invariant: bool,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Evaluate teacher and student on a test split while substituting each
/// override into the teacher's metadata. The student is re-evaluated under
/// every override as well; its reports must come out identical, which the
/// returned flag records (the framework's invariance claim made literal).
#[allow(clippy::too_many_arguments)]
pub fn ood_metadata_eval(
    teacher_config: &BackboneConfig,
    teacher_params: &ParamSnapshot,
    student_config: &BackboneConfig,
    student_params: &ParamSnapshot,
    data: &LoadedDataset,
    test_indices: &[usize],
    overrides: &[OverrideSpec],
    mask: &MetaMask,
) -> Result<OodReport> {
    if overrides.is_empty() {
        return Err(Error::InvalidConfig("empty substitution list".into()));
    }
    let teacher_baseline = evaluate(teacher_config, teacher_params, data, test_indices, mask, None)?;
    let student_baseline = evaluate(student_config, student_params, data, test_indices, mask, None)?;

    let mut rows = Vec::with_capacity(overrides.len());
    let mut maps = Vec::new();
    let mut accs = Vec::new();
    let mut student_invariant = true;
    for o in overrides {
        let ov = *o;
        let f = move |m: &GeoTemporal| ov.apply(m);
        let teacher = evaluate(teacher_config, teacher_params, data, test_indices, mask, Some(&f))?;
        let student = evaluate(student_config, student_params, data, test_indices, mask, Some(&f))?;
        if student.map.to_bits() != student_baseline.map.to_bits()
            || student.accuracy.map(f64::to_bits) != student_baseline.accuracy.map(f64::to_bits)
        {
            student_invariant = false;
        }
        maps.push(teacher.map);
        if let Some(a) = teacher.accuracy {
            accs.push(a);
        }
        rows.push(OodRow { spec: *o, teacher, student });
    }
    let (map_mean, map_std) = mean_std(&maps);
    let (acc_mean, acc_std) = if accs.len() == rows.len() {
        let (m, s) = mean_std(&accs);
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    Ok(OodReport {
        teacher_baseline,
        student_baseline,
        rows,
        teacher_map_mean: map_mean,
        teacher_map_std: map_std,
        teacher_accuracy_mean: acc_mean,
        teacher_accuracy_std: acc_std,
        student_invariant,
    })
}
