//! Static PNG plots from run artifacts. No text is drawn; axes span the data range.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use selfie_core::probe::HeatmapGrid;
use selfie_core::train::CurvePoint;

use crate::CliError;

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: u32 = 30;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const PALETTE: [Rgb<u8>; 4] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([148, 103, 189]),
];

fn save(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    img.save(path).map_err(|e| CliError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, WHITE);
    for x in MARGIN..W - MARGIN / 2 {
        img.put_pixel(x, H - MARGIN, AXIS);
    }
    for y in MARGIN / 2..=H - MARGIN {
        img.put_pixel(MARGIN, y, AXIS);
    }
    img
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (x0 + t * (x1 - x0)).round();
        let y = (y0 + t * (y1 - y0)).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// One polyline per series.
pub fn line_plot(series: &[Vec<(f64, f64)>], path: &Path) -> Result<(), CliError> {
    let mut img = canvas();
    let (x0, x1) = range(series.iter().flatten().map(|p| p.0));
    let (y0, y1) = range(series.iter().flatten().map(|p| p.1));
    let px = |x: f64| MARGIN as f64 + (x - x0) / (x1 - x0) * (W - 2 * MARGIN) as f64;
    let py = |y: f64| (H - MARGIN) as f64 - (y - y0) / (y1 - y0) * (H - 2 * MARGIN) as f64;
    for (k, s) in series.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, f64)> = s
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| (px(x), py(y)))
            .collect();
        for w in pts.windows(2) {
            line(&mut img, w[0], w[1], c);
        }
        if pts.len() == 1 {
            line(&mut img, pts[0], pts[0], c);
        }
    }
    save(&img, path)
}

/// Vertical bars, one per value, from zero.
pub fn bar_plot(values: &[f64], path: &Path) -> Result<(), CliError> {
    let mut img = canvas();
    let top = values.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let n = values.len().max(1) as f64;
    let slot = (W - 2 * MARGIN) as f64 / n;
    for (i, &v) in values.iter().enumerate() {
        let h = (v.max(0.0) / top * (H - 2 * MARGIN) as f64).round() as u32;
        let x_start = (MARGIN as f64 + i as f64 * slot + slot * 0.15) as u32;
        let x_end = (MARGIN as f64 + (i + 1) as f64 * slot - slot * 0.15) as u32;
        for x in x_start..x_end.max(x_start + 1) {
            for y in (H - MARGIN - h)..(H - MARGIN) {
                img.put_pixel(x, y, PALETTE[0]);
            }
        }
    }
    save(&img, path)
}

fn heat_color(v: f64) -> Rgb<u8> {
    let t = v.clamp(0.0, 1.0);
    Rgb([
        (255.0 * t) as u8,
        (255.0 * (1.0 - (2.0 * t - 1.0).abs()) * 0.8) as u8,
        (255.0 * (1.0 - t)) as u8,
    ])
}

/// Row-major grid of values in [0, 1], one block per cell.
pub fn heatmap(rows: usize, cols: usize, values: &[f64], path: &Path) -> Result<(), CliError> {
    if rows * cols != values.len() || rows == 0 || cols == 0 {
        return Err(CliError::Image {
            path: path.to_path_buf(),
            reason: format!("{} values for a {rows}x{cols} heatmap", values.len()),
        });
    }
    let cell = (W / cols as u32).min(H / rows as u32).clamp(2, 40);
    let mut img = RgbImage::from_pixel(cell * cols as u32, cell * rows as u32, WHITE);
    for r in 0..rows {
        for c in 0..cols {
            let color = heat_color(values[r * cols + c]);
            // Layer 0 at the bottom.
            let y0 = (rows - 1 - r) as u32 * cell;
            for y in y0..y0 + cell {
                for x in c as u32 * cell..(c as u32 + 1) * cell {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    save(&img, path)
}

pub fn heatmap_grid(grid: &HeatmapGrid, path: &Path) -> Result<(), CliError> {
    let (r, c) = grid.shape();
    heatmap(r, c, &grid.rates, path)
}

/// Train and validation loss against step.
pub fn loss_curve(points: &[CurvePoint], path: &Path) -> Result<(), CliError> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for p in points {
        match p {
            CurvePoint::Train { step, loss, .. } => train.push((*step as f64, *loss)),
            CurvePoint::Val { step, loss, .. } => val.push((*step as f64, *loss)),
        }
    }
    line_plot(&[train, val], path)
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn bad(path: &Path, reason: impl Into<String>) -> CliError {
    CliError::Config {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Numeric columns of a CSV with a header row.
fn csv_columns(path: &Path, text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| bad(path, "empty csv"))?
        .split(',')
        .map(String::from)
        .collect();
    let mut cols = vec![Vec::new(); header.len()];
    for (i, l) in lines.enumerate() {
        for (j, cell) in l.split(',').enumerate().take(header.len()) {
            let v = if cell.is_empty() {
                f64::NAN
            } else {
                cell.parse::<f64>()
                    .map_err(|_| bad(path, format!("line {}: `{cell}` is not a number", i + 2)))?
            };
            cols[j].push(v);
        }
    }
    Ok((header, cols))
}

/// Render a plot for a known artifact. Returns the images written.
pub fn plot_artifact(input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let name = input
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| bad(input, "no file name"))?;
    let stem = name.split('.').next().unwrap_or(name);
    let text = read(input)?;
    if name.ends_with(".jsonl") {
        let points: Vec<CurvePoint> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| bad(input, e.to_string())))
            .collect::<Result<_, _>>()?;
        let out = out_dir.join(format!("{stem}.png"));
        loss_curve(&points, &out)?;
        return Ok(vec![out]);
    }
    if name.ends_with(".json") {
        let grids: Vec<(String, HeatmapGrid)> = heatmaps_from_json(input, &text)?;
        let mut outs = Vec::new();
        for (label, g) in grids {
            let out = out_dir.join(format!("{stem}_{label}.png"));
            heatmap_grid(&g, &out)?;
            outs.push(out);
        }
        return Ok(outs);
    }
    if name.ends_with(".csv") && text.starts_with("method,valid_scales,") {
        // Combined eval histogram: one chart per method.
        let mut by_method: Vec<(String, Vec<f64>)> = Vec::new();
        for (i, l) in text.lines().skip(1).filter(|l| !l.trim().is_empty()).enumerate() {
            let cells: Vec<&str> = l.split(',').collect();
            let count = cells
                .get(2)
                .and_then(|c| c.parse::<f64>().ok())
                .ok_or_else(|| bad(input, format!("line {}: expected method,valid_scales,items", i + 2)))?;
            match by_method.iter_mut().find(|(m, _)| m == cells[0]) {
                Some((_, v)) => v.push(count),
                None => by_method.push((cells[0].to_string(), vec![count])),
            }
        }
        let mut outs = Vec::new();
        for (method, counts) in by_method {
            let out = out_dir.join(format!("{stem}_{method}.png"));
            bar_plot(&counts, &out)?;
            outs.push(out);
        }
        return Ok(outs);
    }
    if name.ends_with(".csv") {
        let (header, cols) = csv_columns(input, &text)?;
        let out = out_dir.join(format!("{stem}.png"));
        match header.first().map(String::as_str) {
            Some("valid_scales") if cols.len() >= 2 => bar_plot(&cols[1], &out)?,
            Some("component") if cols.len() >= 2 => {
                line_plot(&[cols[0].iter().cloned().zip(cols[1].iter().cloned()).collect()], &out)?
            }
            _ => return Err(bad(input, "unrecognized csv layout")),
        }
        return Ok(vec![out]);
    }
    Err(bad(input, "unrecognized artifact"))
}

/// Heatmaps stored by the bridge probe: `{"cases": [{"trained": grid, "untrained": grid?}]}`.
fn heatmaps_from_json(path: &Path, text: &str) -> Result<Vec<(String, HeatmapGrid)>, CliError> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| bad(path, e.to_string()))?;
    let cases = v
        .get("cases")
        .and_then(|c| c.as_array())
        .ok_or_else(|| bad(path, "expected a `cases` array of heatmaps"))?;
    let mut out = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        for method in ["trained", "untrained"] {
            if let Some(g) = c.get(method).filter(|g| !g.is_null()) {
                let grid: HeatmapGrid = serde_json::from_value(g.clone()).map_err(|e| bad(path, e.to_string()))?;
                out.push((format!("{i}_{method}"), grid));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        line_plot(&[vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.2)]], &p).unwrap();
        let img = image::open(&p).unwrap();
        assert_eq!((img.width(), img.height()), (W, H));
        bar_plot(&[1.0, 0.0, 3.0], &dir.path().join("b.png")).unwrap();
        heatmap(2, 3, &[0.0, 0.5, 1.0, 0.2, 0.1, 0.0], &dir.path().join("c.png")).unwrap();
        assert!(heatmap(2, 2, &[0.0], &dir.path().join("d.png")).is_err());
    }

    #[test]
    fn csv_dispatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pca.csv");
        std::fs::write(&p, "component,cumulative_variance\n1,0.5\n2,1\n").unwrap();
        let out = plot_artifact(&p, dir.path()).unwrap();
        assert_eq!(out, vec![dir.path().join("pca.png")]);
        let q = dir.path().join("x.csv");
        std::fs::write(&q, "foo,bar\n1,2\n").unwrap();
        assert!(plot_artifact(&q, dir.path()).is_err());
    }
}
