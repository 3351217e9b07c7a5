//! Static PNG output: image grids, bar charts, scatter plots and line plots.
//!
//! Plots carry no text; every plot is written next to a CSV with the numbers.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use jointok_core::autograd::{Scalar, Tensor};

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const MARGIN: u32 = 24;
const SERIES: [Rgb<u8>; 6] =
    [Rgb([31, 119, 180]), Rgb([255, 127, 14]), Rgb([44, 160, 44]), Rgb([214, 39, 40]), Rgb([148, 103, 189]), Rgb([140, 86, 75])];

pub fn series_color(i: usize) -> Rgb<u8> {
    SERIES[i % SERIES.len()]
}

fn to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// Tiles `[B, H, W, C]` images in [-1, 1] into rows of `cols` cells, each upscaled by `scale`.
pub fn image_grid<T: Scalar>(images: &Tensor<T>, cols: usize, scale: u32) -> RgbImage {
    let (b, h, w, c) = (images.dim(0), images.dim(1), images.dim(2), images.dim(3));
    let cols = cols.clamp(1, b.max(1));
    let rows = b.div_ceil(cols);
    let pad = 2u32;
    let cell_w = w as u32 * scale + pad;
    let cell_h = h as u32 * scale + pad;
    let mut out = RgbImage::from_pixel(cols as u32 * cell_w + pad, rows as u32 * cell_h + pad, BG);
    let data = images.data();
    for i in 0..b {
        let (gx, gy) = ((i % cols) as u32 * cell_w + pad, (i / cols) as u32 * cell_h + pad);
        for y in 0..h {
            for x in 0..w {
                let base = ((i * h + y) * w + x) * c;
                let px = |ch: usize| to_u8(data[base + ch.min(c - 1)].as_f64());
                let rgb = Rgb([px(0), px(1), px(2)]);
                for dy in 0..scale {
                    for dx in 0..scale {
                        out.put_pixel(gx + x as u32 * scale + dx, gy + y as u32 * scale + dy, rgb);
                    }
                }
            }
        }
    }
    out
}

struct Frame {
    img: RgbImage,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(width: u32, height: u32, (x0, x1): (f64, f64), (y0, y1): (f64, f64)) -> Self {
        let mut img = RgbImage::from_pixel(width, height, BG);
        for x in MARGIN..width - MARGIN / 2 {
            img.put_pixel(x, height - MARGIN, AXIS);
        }
        for y in MARGIN / 2..=height - MARGIN {
            img.put_pixel(MARGIN, y, AXIS);
        }
        let widen = |a: f64, b: f64| if (b - a).abs() < 1e-12 { (a - 0.5, b + 0.5) } else { (a, b) };
        let (x0, x1) = widen(x0, x1);
        let (y0, y1) = widen(y0, y1);
        Self { img, x0, x1, y0, y1 }
    }

    fn to_px(&self, x: f64, y: f64) -> (i64, i64) {
        let (w, h) = (self.img.width() as f64, self.img.height() as f64);
        let m = MARGIN as f64;
        let px = m + 1.0 + (x - self.x0) / (self.x1 - self.x0) * (w - 1.5 * m - 2.0);
        let py = h - m - 1.0 - (y - self.y0) / (self.y1 - self.y0) * (h - 1.5 * m - 2.0);
        (px.round() as i64, py.round() as i64)
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn segment(&mut self, a: (i64, i64), b: (i64, i64), c: Rgb<u8>) {
        let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = a.0 as f64 + t * (b.0 - a.0) as f64;
            let y = a.1 as f64 + t * (b.1 - a.1) as f64;
            self.put(x.round() as i64, y.round() as i64, c);
        }
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

pub fn bar_chart(values: &[f64]) -> RgbImage {
    let top = range(values.iter().copied()).1.max(0.0);
    let mut f = Frame::new(640, 320, (0.0, values.len().max(1) as f64), (0.0, top));
    for (i, &v) in values.iter().enumerate() {
        let (xa, ya) = f.to_px(i as f64, 0.0);
        let (xb, yb) = f.to_px(i as f64 + 0.8, v.max(0.0));
        for x in xa..=xb.max(xa) {
            for y in yb..=ya {
                f.put(x, y, series_color(0));
            }
        }
    }
    f.img
}

/// Scatter of several point sets, each in its own colour.
pub fn scatter(sets: &[Vec<(f64, f64)>]) -> RgbImage {
    let xs = range(sets.iter().flatten().map(|p| p.0));
    let ys = range(sets.iter().flatten().map(|p| p.1));
    let mut f = Frame::new(480, 480, xs, ys);
    for (i, set) in sets.iter().enumerate() {
        for &(x, y) in set {
            let (px, py) = f.to_px(x, y);
            for d in -1..=1 {
                f.put(px + d, py, series_color(i));
                f.put(px, py + d, series_color(i));
            }
        }
    }
    f.img
}

/// Polylines of `(x, y)` series sharing one pair of axes.
pub fn line_plot(series: &[Vec<(f64, f64)>]) -> RgbImage {
    let xs = range(series.iter().flatten().map(|p| p.0));
    let ys = range(series.iter().flatten().map(|p| p.1));
    let mut f = Frame::new(640, 360, xs, ys);
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<(i64, i64)> = s.iter().filter(|p| p.1.is_finite()).map(|&(x, y)| f.to_px(x, y)).collect();
        for w in pts.windows(2) {
            f.segment(w[0], w[1], series_color(i));
        }
    }
    f.img
}

pub fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_layout_and_pixel_mapping() {
        let mut data = vec![0.0f32; 3 * 2 * 2 * 3];
        data[0] = 1.0;
        data[1] = -1.0;
        let img = image_grid(&Tensor::from_vec(vec![3, 2, 2, 3], data), 2, 3);
        // two columns, two rows of 2x2 images scaled by 3 with 2 px padding
        assert_eq!((img.width(), img.height()), (2 * 8 + 2, 2 * 8 + 2));
        assert_eq!(img.get_pixel(2, 2), &Rgb([255, 0, 128]));
        assert_eq!(img.get_pixel(0, 0), &BG);
    }

    #[test]
    fn plots_survive_degenerate_input() {
        assert_eq!(bar_chart(&[]).width(), 640);
        let flat = line_plot(&[vec![(0.0, 1.0), (1.0, 1.0)], vec![(0.0, f64::NAN)]]);
        assert!(flat.pixels().any(|p| *p == series_color(0)));
        let one = scatter(&[vec![(0.5, 0.5)]]);
        assert!(one.pixels().any(|p| *p == series_color(0)));
    }
}
