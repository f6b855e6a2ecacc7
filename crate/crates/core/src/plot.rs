//! Figures rendered from data files only: line panels, heatmaps and image
//! grids. Every figure is written as a PNG plus a JSON sidecar holding the
//! plotted numbers, so it can be re-rendered elsewhere with labels.
//!
//! The rasterizer draws no text. Series colors follow [`PALETTE`] in the
//! order the series appear in the sidecar.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricLog;

pub const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

/// Tiles `[B, C, H, W]` images in `[0, 1]` into a `rows x cols` grid with a
/// 2-pixel white gutter.
pub fn image_grid(images: &Tensor, rows: usize, cols: usize) -> Result<RgbImage> {
    let (b, c, h, w) = images.dims4()?;
    if b != rows * cols {
        return Err(Error::Shape(format!("{b} images for a {rows}x{cols} grid")));
    }
    let data = images.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let gap = 2;
    let mut img = RgbImage::from_pixel((cols * (w + gap) + gap) as u32, (rows * (h + gap) + gap) as u32, Rgb([255, 255, 255]));
    for i in 0..b {
        let (r, col) = (i / cols, i % cols);
        let (ox, oy) = (gap + col * (w + gap), gap + r * (h + gap));
        for y in 0..h {
            for x in 0..w {
                let px = |ch: usize| {
                    let ch = ch.min(c - 1);
                    (data[((i * c + ch) * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8
                };
                img.put_pixel((ox + x) as u32, (oy + y) as u32, Rgb([px(0), px(1), px(2)]));
            }
        }
    }
    Ok(img)
}

fn colormap(t: f64) -> Rgb<u8> {
    // Dark blue -> teal -> yellow.
    let stops = [[68.0, 1.0, 84.0], [33.0, 145.0, 140.0], [253.0, 231.0, 37.0]];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let (a, b, f) = if t < 0.5 { (stops[0], stops[1], t * 2.0) } else { (stops[1], stops[2], (t - 0.5) * 2.0) };
    Rgb([0, 1, 2].map(|i| (a[i] + (b[i] - a[i]) * f).round() as u8))
}

/// Row-major matrix as a heatmap, `cell` pixels per entry, min-max scaled.
pub fn heatmap(values: &[f64], rows: usize, cols: usize, cell: usize) -> Result<RgbImage> {
    if values.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(Error::Shape(format!("{} values for a {rows}x{cols} heatmap", values.len())));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let cell = cell.max(1);
    let mut img = RgbImage::new((cols * cell) as u32, (rows * cell) as u32);
    for (i, v) in values.iter().enumerate() {
        let color = colormap((v - lo) / span);
        let (r, c) = (i / cols, i % cols);
        for y in 0..cell {
            for x in 0..cell {
                img.put_pixel((c * cell + x) as u32, (r * cell + y) as u32, color);
            }
        }
    }
    Ok(img)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub series: Vec<Series>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Figure {
    pub kind: String,
    pub panels: Vec<Panel>,
}

impl Figure {
    /// Writes `<out>` (PNG) and `<out>.json` (sidecar). Returns both paths.
    /// Writes the PNG (`.png` is appended when `out` has no extension) and
    /// a `<png>.json` sidecar with the plotted data.
    pub fn save(&self, out: &Path) -> Result<(PathBuf, PathBuf)> {
        let png = if out.extension().is_some() { out.to_path_buf() } else { out.with_extension("png") };
        self.render(360, 260).save(&png)?;
        let sidecar = PathBuf::from(format!("{}.json", png.display()));
        std::fs::write(&sidecar, serde_json::to_string_pretty(self)?)?;
        Ok((png, sidecar))
    }

    pub fn render(&self, panel_w: u32, panel_h: u32) -> RgbImage {
        let n = self.panels.len().max(1) as u32;
        let mut img = RgbImage::from_pixel(panel_w * n, panel_h, Rgb([255, 255, 255]));
        for (i, p) in self.panels.iter().enumerate() {
            draw_panel(&mut img, p, i as u32 * panel_w, panel_w, panel_h);
        }
        img
    }
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>, thick: i64) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        for ox in 0..thick {
            for oy in 0..thick {
                let (px, py) = (x + ox, y + oy);
                if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                    img.put_pixel(px as u32, py as u32, color);
                }
            }
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn draw_panel(img: &mut RgbImage, panel: &Panel, ox: u32, w: u32, h: u32) {
    let margin = 24i64;
    let (left, right) = (ox as i64 + margin, (ox + w) as i64 - margin / 2);
    let (top, bottom) = (margin / 2, h as i64 - margin);
    let tx = |x: f64| if panel.log_x { x.max(1e-12).log10() } else { x };
    let pts: Vec<(f64, f64)> = panel
        .series
        .iter()
        .flat_map(|s| s.points.iter().map(|&(x, y)| (tx(x), y)))
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let axis = Rgb([60, 60, 60]);
    let grid = Rgb([225, 225, 225]);
    for i in 1..4 {
        let y = top + (bottom - top) * i / 4;
        draw_line(img, (left, y), (right, y), grid, 1);
        let x = left + (right - left) * i / 4;
        draw_line(img, (x, top), (x, bottom), grid, 1);
    }
    draw_line(img, (left, bottom), (right, bottom), axis, 1);
    draw_line(img, (left, top), (left, bottom), axis, 1);
    if pts.is_empty() {
        return;
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = (y1 - y0) * 0.05;
    let (y0, y1) = (y0 - pad, y1 + pad);
    let map = |x: f64, y: f64| {
        let px = left + ((tx(x) - x0) / (x1 - x0) * (right - left - 4) as f64).round() as i64 + 2;
        let py = bottom - ((y - y0) / (y1 - y0) * (bottom - top) as f64).round() as i64;
        (px, py)
    };
    for (i, s) in panel.series.iter().enumerate() {
        let c = Rgb(PALETTE[i % PALETTE.len()]);
        let valid: Vec<(f64, f64)> = s.points.iter().copied().filter(|(x, y)| tx(*x).is_finite() && y.is_finite()).collect();
        for pair in valid.windows(2) {
            draw_line(img, map(pair[0].0, pair[0].1), map(pair[1].0, pair[1].1), c, 2);
        }
        for &(x, y) in &valid {
            let (px, py) = map(x, y);
            for dx in -2..=2 {
                draw_line(img, (px + dx, py - 2), (px + dx, py + 2), c, 1);
            }
        }
    }
}

/// Figure families emitted by the `plot` command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// Reconstruction error and AR CE against lambda (log x), one line per arm.
    Sweep,
    /// Training curves from metrics CSVs, one line per run directory.
    Curves,
    /// Sample-quality proxies against the visual guidance scale, two panels.
    CfgTradeoff,
}

impl PlotKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sweep" => Ok(Self::Sweep),
            "curves" => Ok(Self::Curves),
            "cfg-tradeoff" => Ok(Self::CfgTradeoff),
            _ => Err(Error::Config(format!("unknown plot kind {s:?} (sweep, curves, cfg-tradeoff)"))),
        }
    }
}

/// Rows of a CSV as column -> value maps, after checking `required` columns.
pub fn read_table(path: &Path, required: &[&str]) -> Result<Vec<BTreeMap<String, String>>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = rd.headers().map_err(|e| Error::Format(e.to_string()))?.iter().map(String::from).collect();
    let missing: Vec<&str> = required.iter().copied().filter(|r| !headers.iter().any(|h| h == r)).collect();
    if !missing.is_empty() {
        return Err(Error::Format(format!("{} is missing columns: {}", path.display(), missing.join(", "))));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        rows.push(headers.iter().cloned().zip(rec.iter().map(String::from)).collect());
    }
    Ok(rows)
}

fn num(row: &BTreeMap<String, String>, key: &str) -> Result<f64> {
    row[key].trim().parse::<f64>().map_err(|_| Error::Format(format!("column {key}: {:?} is not a number", row[key])))
}

/// Groups rows by `group` and collects `(x, y)` pairs sorted by x.
fn grouped(rows: &[BTreeMap<String, String>], group: Option<&str>, x: &str, y: &str) -> Result<Vec<Series>> {
    let mut by: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        let label = group.map(|g| r[g].clone()).unwrap_or_default();
        by.entry(label).or_default().push((num(r, x)?, num(r, y)?));
    }
    Ok(by
        .into_iter()
        .map(|(label, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label, points }
        })
        .collect())
}

/// Builds the figure for `kind` from data files.
///
/// * `Sweep`: one CSV with `arm,lambda,recon_l1,ce_visual`.
/// * `Curves`: metrics CSVs (`step,metric,value`); the parent directory
///   name (the run's hash-stamped name) labels each line. Panels follow
///   `metrics`.
/// * `CfgTradeoff`: one CSV with `s_vis,fidelity,consistency` and an
///   optional `variant` column.
pub fn build_figure(kind: PlotKind, inputs: &[PathBuf], metrics: &[String]) -> Result<Figure> {
    if inputs.is_empty() {
        return Err(Error::InvalidInput("no input files to plot".into()));
    }
    match kind {
        PlotKind::Sweep => {
            let rows = read_table(&inputs[0], &["arm", "lambda", "recon_l1", "ce_visual"])?;
            let panel = |y: &str| -> Result<Panel> {
                Ok(Panel {
                    title: format!("{y} vs lambda"),
                    x_label: "lambda".into(),
                    y_label: y.into(),
                    log_x: true,
                    series: grouped(&rows, Some("arm"), "lambda", y)?,
                })
            };
            Ok(Figure { kind: "sweep".into(), panels: vec![panel("recon_l1")?, panel("ce_visual")?] })
        }
        PlotKind::Curves => {
            let metrics: Vec<String> = if metrics.is_empty() {
                vec!["eval/ce_visual".into(), "train/ce_total".into(), "train/top1".into()]
            } else {
                metrics.to_vec()
            };
            let mut logs = Vec::new();
            for p in inputs {
                let label = p
                    .parent()
                    .and_then(|d| d.file_name())
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| p.display().to_string());
                logs.push((label, MetricLog::read_csv(p)?));
            }
            let panels = metrics
                .iter()
                .map(|m| Panel {
                    title: m.clone(),
                    x_label: "step".into(),
                    y_label: m.clone(),
                    log_x: false,
                    series: logs
                        .iter()
                        .map(|(label, log)| Series { label: label.clone(), points: log.series(m).into_iter().map(|(s, v)| (s as f64, v)).collect() })
                        .collect(),
                })
                .collect();
            Ok(Figure { kind: "curves".into(), panels })
        }
        PlotKind::CfgTradeoff => {
            let rows = read_table(&inputs[0], &["s_vis", "fidelity", "consistency"])?;
            let group = rows.first().filter(|r| r.contains_key("variant")).map(|_| "variant");
            let panel = |y: &str| -> Result<Panel> {
                Ok(Panel {
                    title: format!("{y} vs s_vis"),
                    x_label: "s_vis".into(),
                    y_label: y.into(),
                    log_x: false,
                    series: grouped(&rows, group, "s_vis", y)?,
                })
            };
            Ok(Figure { kind: "cfg-tradeoff".into(), panels: vec![panel("fidelity")?, panel("consistency")?] })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn grid_layout() {
        let imgs = Tensor::ones((6, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let g = image_grid(&imgs, 2, 3).unwrap();
        assert_eq!((g.width(), g.height()), (3 * 6 + 2, 2 * 6 + 2));
        assert_eq!(g.get_pixel(2, 2), &Rgb([255, 255, 255]));
        assert!(image_grid(&imgs, 2, 2).is_err());
    }

    #[test]
    fn sweep_figure_from_csv() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("sweep.csv");
        std::fs::write(
            &csv,
            "arm,lambda,recon_l1,ce_visual\nprologue,0.03,0.1,3\nprologue,3,0.11,2.5\nbaseline_2d_arreg,3,0.3,1\nbaseline_2d_arreg,0.03,0.1,3\n",
        )
        .unwrap();
        let fig = build_figure(PlotKind::Sweep, &[csv], &[]).unwrap();
        assert_eq!(fig.panels.len(), 2);
        assert!(fig.panels[0].log_x);
        assert_eq!(fig.panels[0].series.len(), 2);
        assert_eq!(fig.panels[0].series[0].points, vec![(0.03, 0.1), (3.0, 0.3)]);
        let (png, side) = fig.save(&dir.path().join("sweep.png")).unwrap();
        assert!(png.exists() && side.exists());
        // Same data, same bytes.
        let a = std::fs::read(&png).unwrap();
        fig.save(&dir.path().join("sweep.png")).unwrap();
        assert_eq!(a, std::fs::read(&png).unwrap());
    }

    #[test]
    fn missing_columns_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("bad.csv");
        std::fs::write(&csv, "s_vis,fidelity\n1,2\n").unwrap();
        let err = build_figure(PlotKind::CfgTradeoff, &[csv], &[]).unwrap_err().to_string();
        assert!(err.contains("consistency"), "{err}");
    }

    #[test]
    fn heatmap_extremes() {
        let img = heatmap(&[0.0, 1.0, 0.5, 0.25], 2, 2, 3).unwrap();
        assert_eq!((img.width(), img.height()), (6, 6));
        assert_eq!(img.get_pixel(0, 0), &colormap(0.0));
        assert_eq!(img.get_pixel(3, 0), &colormap(1.0));
    }
}
