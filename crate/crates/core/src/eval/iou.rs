//! Attention-vs-mask agreement across noise levels.

use ctcal_autodiff::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{add_noise, to_model_range, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{Branch, Model};
use crate::scene::{sample_seed, SceneSample};

/// Area-weighted downsampling of a square `[R * R]` mask to `[r * r]`; `R` must be a multiple of `r`.
pub fn downsample_mask(mask: &[f32], from: usize, to: usize) -> Result<Vec<f32>> {
    if to == 0 || !from.is_multiple_of(to) || mask.len() != from * from {
        return Err(Error::ShapeMismatch(format!("cannot area-downsample a {}-element mask from {from} to {to}", mask.len())));
    }
    let f = from / to;
    let area = (f * f) as f32;
    Ok((0..to * to)
        .map(|i| {
            let (y, x) = (i / to, i % to);
            let mut s = 0.0;
            for dy in 0..f {
                for dx in 0..f {
                    s += mask[(y * f + dy) * from + x * f + dx];
                }
            }
            s / area
        })
        .collect())
}

/// `sum(min(a, m)) / sum(max(a, m))` after max-normalizing `a`; an all-zero map scores 0.
///
/// `mask` may be larger than the map as long as its side is a multiple of the map's.
pub fn soft_iou(attn: &[f32], mask: &[f32]) -> Result<f64> {
    let side = |n: usize| (n as f64).sqrt().round() as usize;
    let (h, r) = (side(attn.len()), side(mask.len()));
    if h * h != attn.len() || r * r != mask.len() || h == 0 {
        return Err(Error::ShapeMismatch(format!("soft IoU needs square inputs, got {} and {}", attn.len(), mask.len())));
    }
    let m = if r == h { mask.to_vec() } else { downsample_mask(mask, r, h)? };
    let peak = attn.iter().copied().fold(0.0f32, f32::max);
    if peak <= 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    for (&a, &b) in attn.iter().zip(&m) {
        let a = (a / peak) as f64;
        lo += a.min(b as f64);
        hi += a.max(b as f64);
    }
    Ok(if hi > 0.0 { lo / hi } else { 0.0 })
}

/// Mean and spread of soft-IoU per evaluated timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUCurve {
    pub timesteps: Vec<usize>,
    pub t_train: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Number of (sample, seed) pairs behind every point.
    pub samples: usize,
}

impl IoUCurve {
    /// Spearman correlation between timestep and mean IoU.
    pub fn spearman(&self) -> f64 {
        let t: Vec<f64> = self.timesteps.iter().map(|&t| t as f64).collect();
        spearman(&t, &self.mean)
    }

    /// Index of the largest mean.
    pub fn argmax(&self) -> usize {
        self.mean.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(i, _)| i)
    }

    /// Mean of the points with `t >= frac * T`.
    pub fn mean_above(&self, frac: f64) -> Option<f64> {
        let pts: Vec<f64> =
            self.timesteps.iter().zip(&self.mean).filter(|(&t, _)| t as f64 >= frac * self.t_train as f64).map(|(_, &m)| m).collect();
        (!pts.is_empty()).then(|| pts.iter().sum::<f64>() / pts.len() as f64)
    }
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (x, y) = (a[i] - ma, b[i] - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Rank correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

/// Timesteps at `t / T` in `{0.05, 0.10, ..., 0.95}`.
pub fn fig_timesteps(t_train: usize) -> Vec<usize> {
    (1..=19).map(|k| ((k as f64 * 0.05) * t_train as f64).round() as usize).collect()
}

/// Noise for one (sample, seed) pair; the same draw is reused at every timestep.
pub fn eval_noise(seed: u64, sample: usize, len: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, sample));
    rng.set_stream(7);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

const EVAL_BATCH: usize = 32;

/// Soft-IoU of every noun map against its mask, per timestep, over `samples x seeds`.
pub fn iou_vs_timestep(
    model: &Model<f32>,
    schedule: &NoiseSchedule,
    samples: &[SceneSample],
    timesteps: &[usize],
    seeds: &[u64],
) -> Result<IoUCurve> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if timesteps.is_empty() || timesteps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidTimesteps);
    }
    if seeds.is_empty() {
        return Err(Error::Config("at least one noise seed is required".into()));
    }
    if let Some(&t) = timesteps.iter().find(|&&t| t > schedule.t_train()) {
        return Err(Error::InvalidTimestep { t, lo: 0, hi: schedule.t_train() });
    }
    let r = model.config().resolution;
    if let Some(s) = samples.iter().find(|s| s.resolution != r) {
        return Err(Error::ShapeMismatch(format!("sample resolution {} vs model {r}", s.resolution)));
    }
    let jobs: Vec<(usize, u64)> = seeds.iter().flat_map(|&s| (0..samples.len()).map(move |i| (i, s))).collect();
    let x0: Vec<Vec<f32>> = samples.iter().map(|s| to_model_range(&s.image)).collect();
    let mut mean = Vec::with_capacity(timesteps.len());
    let mut std = Vec::with_capacity(timesteps.len());
    for &t in timesteps {
        let mut scores = Vec::new();
        for chunk in jobs.chunks(EVAL_BATCH) {
            let mut data = Vec::with_capacity(chunk.len() * 3 * r * r);
            for &(i, seed) in chunk {
                let eps = eval_noise(seed, i, x0[i].len());
                data.extend(add_noise(&x0[i], &eps, t, schedule)?);
            }
            let tokens: Vec<Vec<usize>> = chunk.iter().map(|&(i, _)| samples[i].prompt.token_ids()).collect();
            let mut g = Graph::<f32>::new();
            let p = model.params.bind(&mut g, false);
            let x = g.constant(Tensor::new(&[chunk.len(), 3, r, r], data)?);
            let out = model.forward(&mut g, &p, x, &tokens, &vec![t; chunk.len()], Branch::Eval)?;
            for (b, &(i, _)) in chunk.iter().enumerate() {
                let a = model.aggregate(&mut g, &out.records, b)?;
                let a = g.value(a);
                let n = a.shape()[2];
                for m in &samples[i].masks {
                    let slice: Vec<f32> = a.data().iter().skip(m.position).step_by(n).copied().collect();
                    scores.push(soft_iou(&slice, &m.mask)?);
                }
            }
        }
        let mu = scores.iter().sum::<f64>() / scores.len() as f64;
        let var = scores.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / scores.len() as f64;
        mean.push(mu);
        std.push(var.sqrt());
    }
    Ok(IoUCurve { timesteps: timesteps.to_vec(), t_train: schedule.t_train(), mean, std, samples: jobs.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_iou_examples() {
        let m: Vec<f32> = (0..16).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect();
        assert_eq!(soft_iou(&m, &m).unwrap(), 1.0);
        let disjoint: Vec<f32> = m.iter().map(|v| 1.0 - v).collect();
        assert_eq!(soft_iou(&disjoint, &m).unwrap(), 0.0);
        let half: Vec<f32> = (0..16).map(|i| if i < 4 { 1.0 } else { 0.0 }).collect();
        assert_eq!(soft_iou(&half, &m).unwrap(), 0.5);
        assert_eq!(soft_iou(&[0.0; 16], &m).unwrap(), 0.0);
        assert!(soft_iou(&[0.0; 15], &m).is_err());
    }

    #[test]
    fn area_downsampling() {
        let mut m = vec![0.0f32; 16];
        m[0] = 1.0;
        m[1] = 1.0;
        assert_eq!(downsample_mask(&m, 4, 2).unwrap(), vec![0.5, 0.0, 0.0, 0.0]);
        assert!(downsample_mask(&m, 4, 3).is_err());
    }

    #[test]
    fn rank_correlation() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[9.0, 4.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), 0.0);
        let t = fig_timesteps(1000);
        assert_eq!((t.len(), t[0], t[18]), (19, 50, 950));
    }
}
