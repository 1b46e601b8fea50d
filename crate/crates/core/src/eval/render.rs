//! PNG output: attention heatmaps, sample grids and a minimal line plot.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::error::Result;

/// Viridis anchor colors at `0, 1/8, ..., 1`.
const VIRIDIS: [[f64; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 44.0, 122.0],
    [59.0, 81.0, 139.0],
    [44.0, 113.0, 142.0],
    [33.0, 144.0, 141.0],
    [39.0, 173.0, 129.0],
    [92.0, 200.0, 99.0],
    [170.0, 220.0, 50.0],
    [253.0, 231.0, 37.0],
];

pub fn viridis(v: f64) -> [u8; 3] {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let pos = v * 8.0;
    let i = (pos.floor() as usize).min(7);
    let f = pos - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    [0, 1, 2].map(|c| (a[c] + f * (b[c] - a[c])).round() as u8)
}

pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(rgb)?;
    Ok(())
}

/// Nearest-neighbour upscale of an RGB raster.
fn upscale(rgb: &[u8], w: usize, h: usize, k: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(rgb.len() * k * k);
    for y in 0..h * k {
        for x in 0..w * k {
            let i = 3 * ((y / k) * w + x / k);
            out.extend_from_slice(&rgb[i..i + 3]);
        }
    }
    out
}

/// Max-normalized viridis raster of one `[H * W]` map.
pub fn heatmap_rgb(map: &[f32]) -> Vec<u8> {
    let peak = map.iter().copied().fold(0.0f32, f32::max);
    map.iter().flat_map(|&v| viridis(if peak > 0.0 { (v / peak) as f64 } else { 0.0 })).collect()
}

/// File-name-safe form of a token surface.
fn safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

/// One PNG per token of a `[H, W, n]` map, named `{index}_{surface}.png`.
pub fn render_heatmaps(values: &[f32], hw: (usize, usize), surfaces: &[String], dir: &Path, scale: usize) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let (h, w) = hw;
    let n = surfaces.len();
    let scale = scale.max(1);
    let mut paths = Vec::with_capacity(n);
    for (i, s) in surfaces.iter().enumerate() {
        let slice: Vec<f32> = values.iter().skip(i).step_by(n).copied().collect();
        let rgb = upscale(&heatmap_rgb(&slice), w, h, scale);
        let path = dir.join(format!("{i:02}_{}.png", safe(s)));
        write_rgb_png(&path, w * scale, h * scale, &rgb)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Planar `[3, R, R]` image in `[0, 1]` to interleaved bytes.
pub fn image_rgb(image: &[f32], r: usize) -> Vec<u8> {
    let plane = r * r;
    (0..plane).flat_map(|i| [0, 1, 2].map(|c| (image[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8)).collect()
}

pub fn write_image_png(path: &Path, image: &[f32], r: usize, scale: usize) -> Result<()> {
    let scale = scale.max(1);
    write_rgb_png(path, r * scale, r * scale, &upscale(&image_rgb(image, r), r, r, scale))
}

/// 3x5 glyphs, one row per 3-bit mask, for the characters plots need.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        '=' => [0, 7, 0, 7, 0],
        '/' => [1, 1, 2, 4, 4],
        'E' => [7, 4, 6, 4, 7],
        'H' => [5, 5, 7, 5, 5],
        'I' => [7, 2, 2, 2, 7],
        'O' => [7, 5, 5, 5, 7],
        'R' => [6, 5, 6, 5, 5],
        'T' => [7, 2, 2, 2, 2],
        'U' => [5, 5, 5, 5, 7],
        _ => [0; 5],
    }
}

/// White RGB canvas with pixel, line and text primitives.
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, rgb: vec![255; width * height * 3] }
    }

    pub fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = 3 * (y as usize * self.width + x as usize);
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    /// Bresenham segment.
    pub fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.set(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    pub fn text(&mut self, x: i64, y: i64, s: &str, scale: i64, c: [u8; 3]) {
        for (k, ch) in s.chars().enumerate() {
            let g = glyph(ch);
            for (row, bits) in g.iter().enumerate() {
                for col in 0..3 {
                    if bits & (4 >> col) != 0 {
                        for sy in 0..scale {
                            for sx in 0..scale {
                                self.set(x + (k as i64 * 4 + col) * scale + sx, y + row as i64 * scale + sy, c);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_rgb_png(path, self.width, self.height, &self.rgb)
    }
}

/// Line plot of `ys` over `xs`, y-axis fixed to `[0, y_max]`, with tick labels and a caption.
pub fn plot_curve(path: &Path, xs: &[f64], ys: &[f64], y_max: f64, caption: &str) -> Result<()> {
    let (w, h) = (420usize, 300usize);
    let (left, right, top, bottom) = (48i64, 16i64, 30i64, 40i64);
    let mut c = Canvas::new(w, h);
    let black = [0, 0, 0];
    let (pw, ph) = (w as i64 - left - right, h as i64 - top - bottom);
    c.line((left, top), (left, top + ph), black);
    c.line((left, top + ph), (left + pw, top + ph), black);
    let (x_min, x_max) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let x_span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let y_max = if y_max > 0.0 { y_max } else { 1.0 };
    let to_px = |x: f64, y: f64| {
        (left + ((x - x_min) / x_span * pw as f64).round() as i64, top + ph - ((y / y_max).clamp(0.0, 1.0) * ph as f64).round() as i64)
    };
    for k in 0..=4 {
        let yv = y_max * k as f64 / 4.0;
        let (_, py) = to_px(x_min, yv);
        c.line((left - 4, py), (left, py), black);
        c.text(4, py - 2, &format!("{yv:.2}"), 2, black);
        let xv = x_min + x_span * k as f64 / 4.0;
        let (px, _) = to_px(xv, 0.0);
        c.line((px, top + ph), (px, top + ph + 4), black);
        c.text(px - 12, top + ph + 8, &format!("{xv:.2}"), 2, black);
    }
    let blue = [31, 119, 180];
    let pts: Vec<(i64, i64)> = xs.iter().zip(ys).map(|(&x, &y)| to_px(x, y)).collect();
    for p in pts.windows(2) {
        c.line(p[0], p[1], blue);
    }
    for &(x, y) in &pts {
        for d in -2..=2 {
            c.set(x + d, y, blue);
            c.set(x, y + d, blue);
        }
    }
    c.text(left, 8, caption, 2, black);
    c.save(path)
}
