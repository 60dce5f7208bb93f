//! PNG rendering of probe surfaces and metric curves from CSV files.
//!
//! Deliberately independent of the model code: it consumes only the CSV
//! artifacts written by the probe and training commands. Rendering is
//! text-free (color-mapped grids and polylines), which keeps it free of font
//! dependencies.

use crate::error::{Error, Result};
use std::path::Path;

struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_csv(path: &Path) -> Result<Csv> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Csv(format!("{}: empty file", path.display())))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let rows: Vec<Vec<String>> = lines
        .map(|l| l.split(',').map(|s| s.trim().to_string()).collect())
        .collect();
    if rows.is_empty() {
        return Err(Error::Csv(format!("{}: no data rows", path.display())));
    }
    Ok(Csv { header, rows })
}

fn column(csv: &Csv, name: &str) -> Result<Vec<Option<f64>>> {
    let idx = csv
        .header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Csv(format!("missing column {name}")))?;
    Ok(csv
        .rows
        .iter()
        .map(|r| r.get(idx).and_then(|v| v.parse::<f64>().ok()))
        .collect())
}

/// Dark-blue → teal → yellow color map over [0, 1].
fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let stops: [(f64, [f64; 3]); 4] = [
        (0.0, [13.0, 8.0, 135.0]),
        (0.4, [30.0, 120.0, 160.0]),
        (0.7, [60.0, 200.0, 110.0]),
        (1.0, [250.0, 230.0, 40.0]),
    ];
    for w in stops.windows(2) {
        let (t0, c0) = w[0];
        let (t1, c1) = w[1];
        if v <= t1 {
            let f = ((v - t0) / (t1 - t0)).clamp(0.0, 1.0);
            return [
                (c0[0] + f * (c1[0] - c0[0])) as u8,
                (c0[1] + f * (c1[1] - c0[1])) as u8,
                (c0[2] + f * (c1[2] - c0[2])) as u8,
            ];
        }
    }
    [250, 230, 40]
}

/// Render a probe-surface CSV (`lat, lon, day, conf_*`) as a heatmap for one
/// class. Rows must form a full grid in row-major order, as the probe writes
/// them; the PNG is `grid * scale` pixels per side.
pub fn render_heatmap(input: &Path, output: &Path, class: usize, scale: usize) -> Result<()> {
    let csv = read_csv(input)?;
    let conf = column(&csv, &format!("conf_{class}"))?;
    let n = conf.len();
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n {
        return Err(Error::Csv(format!(
            "{} rows do not form a square grid",
            n
        )));
    }
    let values: Vec<f64> = conf
        .into_iter()
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| Error::Csv("non-numeric confidence value".into()))?;
    let scale = scale.max(1);
    let side = (grid * scale) as u32;
    let img = image::RgbImage::from_fn(side, side, |x, y| {
        // Latitude increases upward: flip the row axis for display.
        let gy = grid - 1 - (y as usize / scale);
        let gx = x as usize / scale;
        image::Rgb(colormap(values[gy * grid + gx]))
    });
    img.save(output)
        .map_err(|e| Error::Image(format!("{}: {e}", output.display())))
}

const PANEL_W: usize = 640;
const PANEL_H: usize = 160;
const MARGIN: usize = 8;

fn draw_line(buf: &mut [u8], w: usize, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    let h = buf.len() / (3 * w);
    for s in 0..=steps {
        let f = s as f64 / steps as f64;
        let x = (x0 + f * (x1 - x0)).round() as isize;
        let y = (y0 + f * (y1 - y0)).round() as isize;
        if x >= 0 && (x as usize) < w && y >= 0 && (y as usize) < h {
            let i = 3 * (y as usize * w + x as usize);
            buf[i..i + 3].copy_from_slice(&color);
        }
    }
}

/// Render selected columns of a metrics CSV as stacked line panels over the
/// `step` column (quality/quantity curves, loss curves). Rows with missing
/// values are skipped per panel.
pub fn render_curves(input: &Path, output: &Path, columns: &[String]) -> Result<()> {
    if columns.is_empty() {
        return Err(Error::InvalidConfig("no columns selected".into()));
    }
    let csv = read_csv(input)?;
    let steps = column(&csv, "step")?;
    let height = columns.len() * PANEL_H;
    let mut buf = vec![235u8; PANEL_W * height * 3];
    let palette: [[u8; 3]; 4] = [[200, 60, 40], [30, 90, 180], [30, 150, 70], [150, 60, 170]];

    for (panel, name) in columns.iter().enumerate() {
        let values = column(&csv, name)?;
        let points: Vec<(f64, f64)> = steps
            .iter()
            .zip(&values)
            .filter_map(|(s, v)| Some(((*s)?, (*v)?)))
            .collect();
        if points.is_empty() {
            return Err(Error::Csv(format!("column {name} has no numeric values")));
        }
        let (x_min, x_max) = points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (x, _)| {
                (lo.min(*x), hi.max(*x))
            });
        let (y_min, y_max) = points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, y)| {
                (lo.min(*y), hi.max(*y))
            });
        let y_span = (y_max - y_min).max(1e-12);
        let x_span = (x_max - x_min).max(1e-12);
        let top = panel * PANEL_H;
        // Panel frame.
        for x in 0..PANEL_W {
            for y in [top, top + PANEL_H - 1] {
                let i = 3 * (y * PANEL_W + x);
                buf[i..i + 3].copy_from_slice(&[180, 180, 180]);
            }
        }
        let to_px = |(x, y): (f64, f64)| {
            let px = MARGIN as f64 + (x - x_min) / x_span * (PANEL_W - 2 * MARGIN) as f64;
            let py = (top + PANEL_H - MARGIN) as f64
                - (y - y_min) / y_span * (PANEL_H - 2 * MARGIN) as f64;
            (px, py)
        };
        let color = palette[panel % palette.len()];
        for pair in points.windows(2) {
            let (x0, y0) = to_px(pair[0]);
            let (x1, y1) = to_px(pair[1]);
            draw_line(&mut buf, PANEL_W, x0, y0, x1, y1, color);
        }
    }

    let img = image::RgbImage::from_raw(PANEL_W as u32, height as u32, buf)
        .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
    img.save(output)
        .map_err(|e| Error::Image(format!("{}: {e}", output.display())))
}
