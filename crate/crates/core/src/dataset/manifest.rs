//! Manifest CSV + sidecar JSON I/O.
//!
//! A dataset on disk is a directory with `manifest.csv`, `dataset.json`, and
//! PNG images under it. CSV columns: `id, image_path, labels, lat, lon,
//! day_of_year` where `labels` holds semicolon-separated class indices (empty
//! for unlabeled rows) and `day_of_year` may be empty.

use super::{GeoTemporal, Label, Sample, TaskMode};
use crate::error::{Error, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// One manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative to the dataset root.
    pub image_path: String,
    /// Positive class indices; empty means unlabeled.
    pub labels: Vec<usize>,
    pub meta: GeoTemporal,
}

impl ManifestRecord {
    pub fn label(&self, task_mode: TaskMode, num_classes: usize) -> Option<Label> {
        if self.labels.is_empty() {
            return None;
        }
        Some(match task_mode {
            TaskMode::SingleLabel => Label::Class(self.labels[0]),
            TaskMode::MultiLabel => {
                let mut bits = vec![0u8; num_classes];
                for &c in &self.labels {
                    bits[c] = 1;
                }
                Label::MultiHot(bits)
            }
        })
    }
}

/// Dataset-level config stored next to the manifest as `dataset.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub task_mode: TaskMode,
    pub num_classes: usize,
    pub image_size: usize,
    /// Echo of the generator config for synthetic datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<super::SyntheticWorldConfig>,
    /// Result of the metadata-only baseline run, when one was performed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata_baseline: Option<MetadataBaselineNote>,
}

/// Records how informative the metadata is for this dataset, measured by a
/// metadata-only classifier against the majority-class baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetadataBaselineNote {
    pub baseline_accuracy: f64,
    pub majority_accuracy: f64,
    pub note: String,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    /// Directory containing the manifest; image paths resolve against it.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub task_mode: TaskMode,
    pub num_classes: usize,
    pub image_size: usize,
    pub sidecar: DatasetSidecar,
}

impl DatasetManifest {
    pub fn resolve_image(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.image_path)
    }
}

fn parse_field<T: std::str::FromStr>(row: usize, field: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::ManifestSchema {
        row,
        reason: format!("cannot parse {field} from {value:?}"),
    })
}

/// Load and validate a manifest CSV; `dataset.json` must sit next to it.
/// Row order is preserved; the first invalid row aborts the load with its
/// index.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let root = path
        .parent()
        .ok_or_else(|| Error::InvalidConfig(format!("manifest path {path:?} has no parent")))?
        .to_path_buf();
    let sidecar_path = root.join("dataset.json");
    let sidecar_text = std::fs::read_to_string(&sidecar_path)
        .map_err(|e| Error::io(&sidecar_path, e))?;
    let sidecar: DatasetSidecar = serde_json::from_str(&sidecar_text)
        .map_err(|e| Error::InvalidConfig(format!("bad dataset.json: {e}")))?;

    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    {
        let headers = reader.headers().map_err(|e| Error::Csv(e.to_string()))?;
        let expected = ["id", "image_path", "labels", "lat", "lon", "day_of_year"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::ManifestSchema {
                row: 0,
                reason: format!("header {:?}, expected {:?}", headers, expected),
            });
        }
    }

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Csv(e.to_string()))?;
        let rownum = i + 1;
        if row.len() != 6 {
            return Err(Error::ManifestSchema {
                row: rownum,
                reason: format!("expected 6 fields, got {}", row.len()),
            });
        }
        let mut labels = Vec::new();
        if !row[2].trim().is_empty() {
            for part in row[2].split(';') {
                let c: usize = parse_field(rownum, "labels", part)?;
                if c >= sidecar.num_classes {
                    return Err(Error::ManifestSchema {
                        row: rownum,
                        reason: format!("label index {c} >= num_classes {}", sidecar.num_classes),
                    });
                }
                labels.push(c);
            }
        }
        let lat: f64 = parse_field(rownum, "lat", &row[3])?;
        let lon: f64 = parse_field(rownum, "lon", &row[4])?;
        let day = if row[5].trim().is_empty() {
            None
        } else {
            Some(parse_field(rownum, "day_of_year", &row[5])?)
        };
        let meta = GeoTemporal::new(lat, lon, day).map_err(|e| Error::ManifestSchema {
            row: rownum,
            reason: e.to_string(),
        })?;
        let image_path = row[1].to_string();
        if !root.join(&image_path).is_file() {
            return Err(Error::ManifestSchema {
                row: rownum,
                reason: format!("image_path {image_path:?} does not resolve"),
            });
        }
        records.push(ManifestRecord {
            id: row[0].to_string(),
            image_path,
            labels,
            meta,
        });
    }

    Ok(DatasetManifest {
        root,
        task_mode: sidecar.task_mode,
        num_classes: sidecar.num_classes,
        image_size: sidecar.image_size,
        sidecar,
        records,
    })
}

/// Write `manifest.csv` and `dataset.json` under `manifest.root`.
pub fn save_manifest(manifest: &DatasetManifest) -> Result<()> {
    std::fs::create_dir_all(&manifest.root).map_err(|e| Error::io(&manifest.root, e))?;
    let csv_path = manifest.root.join("manifest.csv");
    let mut file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    writeln!(file, "id,image_path,labels,lat,lon,day_of_year").map_err(|e| Error::io(&csv_path, e))?;
    for r in &manifest.records {
        let labels = r
            .labels
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(";");
        let day = r.meta.day_of_year.map(|d| d.to_string()).unwrap_or_default();
        writeln!(
            file,
            "{},{},{},{},{},{}",
            r.id, r.image_path, labels, r.meta.latitude, r.meta.longitude, day
        )
        .map_err(|e| Error::io(&csv_path, e))?;
    }
    let sidecar_path = manifest.root.join("dataset.json");
    let text = serde_json::to_string_pretty(&manifest.sidecar)
        .map_err(|e| Error::Other(e.to_string()))?;
    std::fs::write(&sidecar_path, text).map_err(|e| Error::io(&sidecar_path, e))?;
    Ok(())
}

fn load_png(path: &Path, image_size: usize) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    if img.width() as usize != image_size || img.height() as usize != image_size {
        return Err(Error::ShapeMismatch(format!(
            "{}: image is {}x{}, dataset config says {}",
            path.display(),
            img.width(),
            img.height(),
            image_size
        )));
    }
    let mut out = Array3::<f64>::zeros((image_size, image_size, 3));
    for y in 0..image_size {
        for x in 0..image_size {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[[y, x, c]] = f64::from(px[c]) / 255.0;
            }
        }
    }
    Ok(out)
}

/// A manifest with all images decoded into memory.
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    images: Vec<Array3<f64>>,
}

impl LoadedDataset {
    pub fn load(manifest: DatasetManifest) -> Result<Self> {
        let mut images = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            images.push(load_png(&manifest.resolve_image(r), manifest.image_size)?);
        }
        Ok(LoadedDataset { manifest, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, index: usize) -> &Array3<f64> {
        &self.images[index]
    }

    pub fn sample(&self, index: usize) -> Sample {
        let r = &self.manifest.records[index];
        Sample {
            id: r.id.clone(),
            image: self.images[index].clone(),
            label: r.label(self.manifest.task_mode, self.manifest.num_classes),
            meta: r.meta,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_dummy_png(path: &Path, size: usize) {
        let img = image::RgbImage::from_fn(size as u32, size as u32, |x, y| {
            image::Rgb([(x * 7 % 256) as u8, (y * 13 % 256) as u8, 128])
        });
        img.save(path).unwrap();
    }

    fn write_dataset(dir: &Path, rows: &[&str]) {
        std::fs::create_dir_all(dir.join("images")).unwrap();
        for size_probe in rows.iter() {
            let name = size_probe.split(',').nth(1).unwrap();
            write_dummy_png(&dir.join(name), 8);
        }
        let mut csv = String::from("id,image_path,labels,lat,lon,day_of_year\n");
        for r in rows {
            csv.push_str(r);
            csv.push('\n');
        }
        std::fs::write(dir.join("manifest.csv"), csv).unwrap();
        std::fs::write(
            dir.join("dataset.json"),
            serde_json::json!({"task_mode": "single-label", "num_classes": 3, "image_size": 8})
                .to_string(),
        )
        .unwrap();
    }

    #[test]
    fn well_formed_csv_parses() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(
            dir.path(),
            &[
                "a,images/a.png,0,48.1,11.6,172",
                "b,images/b.png,2,40.0,-3.7,",
                "c,images/c.png,,52.5,13.4,300.5",
            ],
        );
        let m = load_manifest(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.records[0].id, "a");
        assert_eq!(m.records[1].meta.day_of_year, None);
        assert!(m.records[2].labels.is_empty());
    }

    #[test]
    fn out_of_range_latitude_names_row() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(
            dir.path(),
            &[
                "a,images/a.png,0,48.1,11.6,172",
                "b,images/b.png,1,91.0,0.0,10",
            ],
        );
        let err = load_manifest(&dir.path().join("manifest.csv")).unwrap_err();
        match err {
            Error::ManifestSchema { row, .. } => assert_eq!(row, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_manifest(&dir.path().join("manifest.csv")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn label_index_out_of_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &["a,images/a.png,7,48.0,11.0,1"]);
        let err = load_manifest(&dir.path().join("manifest.csv")).unwrap_err();
        assert!(matches!(err, Error::ManifestSchema { row: 1, .. }));
    }
}
