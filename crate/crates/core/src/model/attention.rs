//! Attention records and their aggregation into per-token spatial maps.

use ctcal_autodiff::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    Student,
    Teacher,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttnKind {
    /// Image queries over text keys.
    Cross,
    /// Joint sequence, image tokens first.
    Joint { n_img: usize },
}

/// Post-softmax weights of one attention layer for a whole batch.
#[derive(Debug, Clone)]
pub struct AttnRecord {
    pub layer: usize,
    pub heads: usize,
    pub batch: usize,
    /// `[batch * heads, queries, keys]`.
    pub weights: Var,
    /// Spatial layout of the image queries.
    pub query_hw: (usize, usize),
    pub kind: AttnKind,
    pub branch: Branch,
    pub timesteps: Vec<usize>,
    /// Unpadded prompt length per item.
    pub text_lens: Vec<usize>,
    /// Key columns before the first prompt token (start token).
    pub text_offset: usize,
}

/// Aggregated map `A` of one item: values `[H, W, n]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMap<T> {
    pub values: Tensor<T>,
    pub branch: Branch,
    pub timestep: usize,
}

impl<T: Real> AttnMap<T> {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn tokens(&self) -> usize {
        self.values.shape()[2]
    }

    /// Spatial map of token `i`, row-major `[H * W]`.
    pub fn slice(&self, i: usize) -> Vec<T> {
        let n = self.tokens();
        self.values.data().iter().skip(i).step_by(n).copied().collect()
    }
}

/// Rows of the image-query / text-key block of a joint attention matrix.
///
/// `full` is `[heads, n_img + n_txt, n_img + n_txt]`; returns `[heads, n_img, n_txt]`.
pub fn extract_image_text_block<T: Real>(full: &Tensor<T>, n_img: usize, n_txt: usize) -> Result<Tensor<T>> {
    let s = full.shape();
    let total = n_img + n_txt;
    if s.len() != 3 || s[1] != total || s[2] != total || n_txt == 0 {
        return Err(Error::ShapeMismatch(format!("joint attention {s:?} for n_img={n_img}, n_txt={n_txt}")));
    }
    let heads = s[0];
    let d = full.data();
    let out = (0..heads * n_img * n_txt)
        .map(|i| {
            let (h, rest) = (i / (n_img * n_txt), i % (n_img * n_txt));
            let (r, c) = (rest / n_txt, rest % n_txt);
            d[(h * total + r) * total + n_img + c]
        })
        .collect();
    Ok(Tensor::new(&[heads, n_img, n_txt], out)?)
}

/// 1-d bilinear interpolation weights `[dst, src]` with half-pixel centres and edge clamping.
pub fn bilinear_weights(src: usize, dst: usize) -> Vec<f64> {
    let mut w = vec![0.0; dst * src];
    for o in 0..dst {
        let pos = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        let frac = pos - lo as f64;
        w[o * src + lo] += 1.0 - frac;
        w[o * src + hi] += frac;
    }
    w
}

/// Separable bilinear resize as a matrix `[H * W, h * w]`.
pub fn resize_matrix<T: Real>(from: (usize, usize), to: (usize, usize)) -> Tensor<T> {
    let wy = bilinear_weights(from.0, to.0);
    let wx = bilinear_weights(from.1, to.1);
    let (h, w) = from;
    Tensor::from_fn(&[to.0 * to.1, h * w], |i| {
        let (row, col) = (i / (h * w), i % (h * w));
        let (oy, ox) = (row / to.1, row % to.1);
        let (iy, ix) = (col / w, col % w);
        T::from_f64_lossy(wy[oy * h + iy] * wx[ox * w + ix])
    })
}

/// Head-mean map of one record for one item: `[queries, n]` on the graph.
fn record_map<T: Real>(g: &mut Graph<T>, rec: &AttnRecord, item: usize) -> Result<Var> {
    let s = g.shape(rec.weights).to_vec();
    if s.len() != 3 || s[0] != rec.batch * rec.heads || item >= rec.batch {
        return Err(Error::ShapeMismatch(format!("attention record {s:?} for batch {} x {} heads", rec.batch, rec.heads)));
    }
    let n = rec.text_lens[item];
    let w = g.narrow(rec.weights, 0, item * rec.heads, rec.heads);
    let (rows, col0) = match rec.kind {
        AttnKind::Cross => (s[1], rec.text_offset),
        AttnKind::Joint { n_img } => (n_img, n_img + rec.text_offset),
    };
    if rows != rec.query_hw.0 * rec.query_hw.1 || col0 + n > s[2] {
        return Err(Error::ShapeMismatch(format!("record {s:?} does not match queries {:?}", rec.query_hw)));
    }
    let w = g.narrow(w, 1, 0, rows);
    let w = g.narrow(w, 2, col0, n);
    let summed = g.sum_leading(w);
    Ok(g.scale(summed, T::from_f64_lossy(1.0 / rec.heads as f64)))
}

/// Differentiable aggregation for one batch item: head mean, bilinear resize to
/// `(resolution, resolution)`, mean over layers, clamp to `[0, 1]`. Returns `[H, W, n]`.
pub fn aggregate_attention<T: Real>(
    g: &mut Graph<T>,
    records: &[AttnRecord],
    item: usize,
    resolution: usize,
    layers: Option<&[usize]>,
) -> Result<Var> {
    let chosen: Vec<&AttnRecord> = records.iter().filter(|r| layers.is_none_or(|l| l.contains(&r.layer))).collect();
    let first = *chosen.first().ok_or(Error::EmptyRecords)?;
    if item >= first.batch {
        return Err(Error::ShapeMismatch(format!("item {item} of a batch of {}", first.batch)));
    }
    let n = first.text_lens[item];
    for r in &chosen {
        if r.branch != first.branch || r.timesteps.get(item) != first.timesteps.get(item) || r.text_lens.get(item) != Some(&n) {
            return Err(Error::MixedProvenance);
        }
    }
    let mut acc: Option<Var> = None;
    for r in &chosen {
        let m = record_map(g, r, item)?;
        let m = if r.query_hw == (resolution, resolution) {
            m
        } else {
            let resize = g.constant(resize_matrix(r.query_hw, (resolution, resolution)));
            g.matmul(resize, m)
        };
        acc = Some(match acc {
            Some(a) => g.add(a, m),
            None => m,
        });
    }
    let mean = g.scale(acc.unwrap(), T::from_f64_lossy(1.0 / chosen.len() as f64));
    let clamped = g.clamp(mean, T::zero(), T::one());
    Ok(g.reshape(clamped, &[resolution, resolution, n]))
}

/// Aggregate as plain values, for evaluation.
pub fn aggregate_values<T: Real>(
    g: &mut Graph<T>,
    records: &[AttnRecord],
    item: usize,
    resolution: usize,
    layers: Option<&[usize]>,
) -> Result<AttnMap<T>> {
    let v = aggregate_attention(g, records, item, resolution, layers)?;
    let first = records.first().ok_or(Error::EmptyRecords)?;
    Ok(AttnMap { values: g.value(v).clone(), branch: first.branch, timestep: first.timesteps[item] })
}
