//! Minimal PNG rendering for reports: line charts and heatmaps. Enough to
//! eyeball a sweep; not a plotting library.

use crate::error::Result;
use image::{Rgb, RgbImage};
use std::path::Path;

const W: u32 = 640;
const H: u32 = 480;
const MARGIN: u32 = 48;

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()) as u32).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (x0 + (x1 - x0) * t).round() as i64;
        let y = (y0 + (y1 - y0) * t).round() as i64;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

const PALETTE: [Rgb<u8>; 5] = [
    Rgb([202, 52, 51]),
    Rgb([51, 102, 204]),
    Rgb([34, 139, 34]),
    Rgb([204, 136, 0]),
    Rgb([120, 60, 160]),
];

/// One named series of (x, y) points.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Renders line series into a PNG. Axes are linear with min/max fitted to
/// the data; y is clamped to `[0, 1]` when `unit_y` is set.
pub fn line_chart(path: &Path, series: &[Series], unit_y: bool) -> Result<()> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if all.is_empty() {
        img.save(path).map_err(|e| crate::Error::Io(e.to_string()))?;
        return Ok(());
    }
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = if unit_y {
        (0.0, 1.0)
    } else {
        (f64::INFINITY, f64::NEG_INFINITY)
    };
    for &(x, y) in &all {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        if !unit_y {
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    if xmax == xmin {
        xmax = xmin + 1.0;
    }
    if ymax == ymin {
        ymax = ymin + 1.0;
    }
    let to_px = |x: f64, y: f64| {
        let px = MARGIN as f64 + (x - xmin) / (xmax - xmin) * (W - 2 * MARGIN) as f64;
        let py = (H - MARGIN) as f64 - (y - ymin) / (ymax - ymin) * (H - 2 * MARGIN) as f64;
        (px, py)
    };
    // axes
    let axis = Rgb([0, 0, 0]);
    let (ox, oy) = (MARGIN as f64, (H - MARGIN) as f64);
    draw_line(&mut img, ox, oy, (W - MARGIN) as f64, oy, axis);
    draw_line(&mut img, ox, oy, ox, MARGIN as f64, axis);
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        for pair in s.points.windows(2) {
            let (x0, y0) = to_px(pair[0].0, pair[0].1);
            let (x1, y1) = to_px(pair[1].0, pair[1].1);
            draw_line(&mut img, x0, y0, x1, y1, color);
        }
        for &(x, y) in &s.points {
            let (px, py) = to_px(x, y);
            for dx in -2i64..=2 {
                for dy in -2i64..=2 {
                    let (qx, qy) = (px as i64 + dx, py as i64 + dy);
                    if qx >= 0 && qy >= 0 && (qx as u32) < W && (qy as u32) < H {
                        img.put_pixel(qx as u32, qy as u32, color);
                    }
                }
            }
        }
    }
    img.save(path).map_err(|e| crate::Error::Io(e.to_string()))?;
    Ok(())
}

/// Renders a matrix as a blue→white→red heatmap PNG.
pub fn heatmap(path: &Path, values: &ndarray::Array2<f64>, cell: u32) -> Result<()> {
    let (rows, cols) = values.dim();
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let mut img = RgbImage::new(cols as u32 * cell, rows as u32 * cell);
    for i in 0..rows {
        for j in 0..cols {
            let v = values[(i, j)];
            let color = if v.is_finite() {
                let t = (v - lo) / span;
                let r = (255.0 * t) as u8;
                let b = (255.0 * (1.0 - t)) as u8;
                let g = (255.0 * (1.0 - (2.0 * t - 1.0).abs())) as u8;
                Rgb([r, g, b])
            } else {
                Rgb([30, 30, 30])
            };
            for dy in 0..cell {
                for dx in 0..cell {
                    img.put_pixel(j as u32 * cell + dx, i as u32 * cell + dy, color);
                }
            }
        }
    }
    img.save(path).map_err(|e| crate::Error::Io(e.to_string()))?;
    Ok(())
}

/// Saves a `[C, H, W]` slice as a grayscale/RGB PNG, min-max normalized.
pub fn save_image(path: &Path, img: &ndarray::ArrayView3<f64>) -> Result<()> {
    let (c, h, w) = img.dim();
    let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ci: usize| (((img[(ci.min(c - 1), y, x)] - lo) / span) * 255.0) as u8;
            out.put_pixel(x as u32, y as u32, Rgb([px(0), px(1.min(c - 1)), px(2.min(c - 1))]));
        }
    }
    out.save(path).map_err(|e| crate::Error::Io(e.to_string()))?;
    Ok(())
}
