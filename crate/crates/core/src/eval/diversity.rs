//! Pixel-space diversity proxy: mean pairwise `1 - NCC` over 8x8 patches.

use crate::error::{Error, Result};

pub const PATCH: usize = 8;

/// Normalized cross-correlation; two constant patches correlate fully when equal and not at all otherwise.
fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x - ma, y - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    const FLAT: f64 = 1e-12;
    match (saa < FLAT, sbb < FLAT) {
        (true, true) => {
            if (ma - mb).abs() < 1e-9 {
                1.0
            } else {
                0.0
            }
        }
        (false, false) => (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0),
        _ => 0.0,
    }
}

/// Channel-stacked 8x8 patch vectors of a `[3, R, R]` image.
fn patches(image: &[f32], r: usize) -> Vec<Vec<f64>> {
    let per = r / PATCH;
    let plane = r * r;
    let mut out = Vec::with_capacity(per * per);
    for py in 0..per {
        for px in 0..per {
            let mut v = Vec::with_capacity(3 * PATCH * PATCH);
            for c in 0..3 {
                for y in 0..PATCH {
                    for x in 0..PATCH {
                        v.push(image[c * plane + (py * PATCH + y) * r + px * PATCH + x] as f64);
                    }
                }
            }
            out.push(v);
        }
    }
    out
}

/// Distance of two images in `[0, 2]`.
pub fn pair_distance(a: &[f32], b: &[f32], resolution: usize) -> f64 {
    let (pa, pb) = (patches(a, resolution), patches(b, resolution));
    pa.iter().zip(&pb).map(|(x, y)| 1.0 - ncc(x, y)).sum::<f64>() / pa.len() as f64
}

/// Mean pairwise distance over images generated for one prompt.
pub fn diversity_score(images: &[Vec<f32>], resolution: usize) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::TooFewImages);
    }
    if resolution < PATCH || !resolution.is_multiple_of(PATCH) {
        return Err(Error::ShapeMismatch(format!("resolution {resolution} is not a multiple of {PATCH}")));
    }
    if let Some(img) = images.iter().find(|i| i.len() != 3 * resolution * resolution) {
        return Err(Error::ShapeMismatch(format!("image with {} values at resolution {resolution}", img.len())));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            total += pair_distance(&images[i], &images[j], resolution);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}
