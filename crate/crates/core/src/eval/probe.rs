//! Gray-image spatiotemporal prior probe.
//!
//! Feeds a constant monochrome image paired with a grid of metadata points to
//! a teacher and records the per-class confidences: what has the model
//! learned about where and when classes occur, independent of pixels?

use super::score_batch;
use crate::dataset::GeoTemporal;
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, MetaMask, ParamSnapshot};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Spatial grid resolution per axis.
    #[serde(default = "default_grid")]
    pub grid: usize,
    /// Number of uniformly spaced day-of-year points.
    #[serde(default = "default_day_points")]
    pub day_points: usize,
    /// Fraction by which the training bounding box is expanded on each side,
    /// so the grid covers out-of-distribution locations too.
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Constant pixel value of the probe image.
    #[serde(default = "default_gray")]
    pub gray: f64,
}

fn default_grid() -> usize {
    64
}
fn default_day_points() -> usize {
    24
}
fn default_margin() -> f64 {
    0.5
}
fn default_gray() -> f64 {
    0.5
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            grid: default_grid(),
            day_points: default_day_points(),
            margin: default_margin(),
            gray: default_gray(),
        }
    }
}

/// One probe evaluation: metadata point plus per-class confidences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbePoint {
    pub meta: GeoTemporal,
    pub confidence: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeResult {
    /// lat × lon surface at a fixed day.
    pub spatial: Vec<ProbePoint>,
    /// Day sweep at a fixed central location.
    pub temporal: Vec<ProbePoint>,
    pub grid: usize,
    pub num_classes: usize,
}

/// Probe a teacher over the training bounding box expanded by the configured
/// margin, pairing every grid point with the same constant image. The fixed
/// day for the spatial surface (and the fixed location for the temporal
/// sweep) come from the box center.
pub fn prior_probe(
    config: &BackboneConfig,
    params: &ParamSnapshot,
    train_metas: &[GeoTemporal],
    probe: &ProbeConfig,
    mask: &MetaMask,
) -> Result<ProbeResult> {
    if train_metas.is_empty() {
        return Err(Error::InvalidConfig("no training metadata for probe box".into()));
    }
    let (mut lat_min, mut lat_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut lon_min, mut lon_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut days: Vec<f64> = Vec::new();
    for m in train_metas {
        lat_min = lat_min.min(m.latitude);
        lat_max = lat_max.max(m.latitude);
        lon_min = lon_min.min(m.longitude);
        lon_max = lon_max.max(m.longitude);
        if let Some(d) = m.day_of_year {
            days.push(d);
        }
    }
    let lat_span = (lat_max - lat_min).max(1e-6);
    let lon_span = (lon_max - lon_min).max(1e-6);
    let lat_lo = (lat_min - probe.margin * lat_span).max(-90.0);
    let lat_hi = (lat_max + probe.margin * lat_span).min(90.0);
    let lon_lo = (lon_min - probe.margin * lon_span).max(-180.0);
    let lon_hi = (lon_max + probe.margin * lon_span).min(180.0);
    let fixed_day = if days.is_empty() {
        None
    } else {
        Some(days.iter().sum::<f64>() / days.len() as f64)
    };
    let center = GeoTemporal {
        latitude: (lat_min + lat_max) / 2.0,
        longitude: (lon_min + lon_max) / 2.0,
        day_of_year: fixed_day,
    };

    let mut spatial_metas = Vec::with_capacity(probe.grid * probe.grid);
    for iy in 0..probe.grid {
        for ix in 0..probe.grid {
            let fy = (iy as f64 + 0.5) / probe.grid as f64;
            let fx = (ix as f64 + 0.5) / probe.grid as f64;
            spatial_metas.push(GeoTemporal {
                latitude: lat_lo + fy * (lat_hi - lat_lo),
                longitude: lon_lo + fx * (lon_hi - lon_lo),
                day_of_year: fixed_day,
            });
        }
    }
    let mut temporal_metas = Vec::with_capacity(probe.day_points);
    for i in 0..probe.day_points {
        temporal_metas.push(GeoTemporal {
            latitude: center.latitude,
            longitude: center.longitude,
            day_of_year: Some(366.0 * i as f64 / probe.day_points as f64),
        });
    }

    let spatial = probe_points(config, params, &spatial_metas, probe.gray, mask)?;
    let temporal = probe_points(config, params, &temporal_metas, probe.gray, mask)?;
    Ok(ProbeResult {
        spatial,
        temporal,
        grid: probe.grid,
        num_classes: config.num_classes,
    })
}

const PROBE_BATCH: usize = 128;

fn probe_points(
    config: &BackboneConfig,
    params: &ParamSnapshot,
    metas: &[GeoTemporal],
    gray: f64,
    mask: &MetaMask,
) -> Result<Vec<ProbePoint>> {
    let s = config.image_size;
    let mut out = Vec::with_capacity(metas.len());
    for chunk in metas.chunks(PROBE_BATCH) {
        let images = ArrayD::<f64>::from_elem(IxDyn(&[chunk.len(), s, s, 3]), gray);
        let probs = score_batch(config, params, images, Some(chunk), mask)?;
        for (j, meta) in chunk.iter().enumerate() {
            out.push(ProbePoint {
                meta: *meta,
                confidence: probs.row(j).to_vec(),
            });
        }
    }
    Ok(out)
}

impl ProbeResult {
    /// CSV with columns `lat, lon, day, conf_0..conf_{K-1}`; the first line
    /// is a `# config_hash=` comment when a hash is supplied.
    pub fn write_csv(points: &[ProbePoint], path: &Path, config_hash: Option<&str>) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        if let Some(h) = config_hash {
            writeln!(file, "# config_hash={h}").map_err(|e| Error::io(path, e))?;
        }
        let k = points.first().map(|p| p.confidence.len()).unwrap_or(0);
        let header: Vec<String> = ["lat", "lon", "day"]
            .iter()
            .map(|s| s.to_string())
            .chain((0..k).map(|c| format!("conf_{c}")))
            .collect();
        writeln!(file, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
        for p in points {
            let day = p.meta.day_of_year.map(|d| d.to_string()).unwrap_or_default();
            let confs: Vec<String> = p.confidence.iter().map(|v| v.to_string()).collect();
            writeln!(
                file,
                "{},{},{},{}",
                p.meta.latitude,
                p.meta.longitude,
                day,
                confs.join(",")
            )
            .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}
