//! Image generation with classifier-free guidance.
//!
//! The unconditional branch reads an all-`[pad]` prompt of the same length as
//! the conditional one. DDPM runs ancestral or deterministic DDIM updates over a
//! strided timestep grid; rectified flow integrates the velocity field with Euler steps.

use ctcal_autodiff::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{from_model_range, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::model::{Branch, Model};
use crate::prompts::Lexicon;

/// Reverse update for DDPM schedules; rectified flow always uses Euler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMethod {
    #[default]
    Ancestral,
    Ddim,
}

impl std::str::FromStr for SamplerMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ancestral" => Ok(Self::Ancestral),
            "ddim" => Ok(Self::Ddim),
            other => Err(Error::Config(format!("unknown sampler method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    pub method: SamplerMethod,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 20, guidance: 3.0, method: SamplerMethod::Ancestral }
    }
}

/// `uncond + w * (cond - uncond)`.
pub fn guide(cond: f32, uncond: f32, w: f64) -> f32 {
    if w == 1.0 {
        return cond;
    }
    uncond + w as f32 * (cond - uncond)
}

/// Decreasing grid `T = t_0 > t_1 > ... > t_S = 0`.
pub fn timestep_grid(t_train: usize, steps: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = (0..steps).map(|k| t_train - k * t_train / steps).collect();
    grid.push(0);
    grid.dedup();
    grid
}

fn guided_prediction(model: &Model<f32>, x: &[f32], prompts: &[Vec<usize>], t: usize, w: f64) -> Result<Vec<f32>> {
    let r = model.config().resolution;
    let b = prompts.len();
    let pad = Lexicon::builtin().pad_id().unwrap_or(0);
    let run = |tokens: &[Vec<usize>]| -> Result<Vec<f32>> {
        let mut g = Graph::<f32>::new();
        let p = model.params.bind(&mut g, false);
        let xv = g.constant(Tensor::new(&[b, 3, r, r], x.to_vec())?);
        let out = model.forward(&mut g, &p, xv, tokens, &vec![t; b], Branch::Eval)?;
        Ok(g.value(out.pred).data().to_vec())
    };
    let cond = run(prompts)?;
    if w == 1.0 {
        return Ok(cond);
    }
    let blank: Vec<Vec<usize>> = prompts.iter().map(|p| vec![pad; p.len()]).collect();
    let uncond = run(&blank)?;
    Ok(cond.iter().zip(&uncond).map(|(&c, &u)| guide(c, u, w)).collect())
}

/// Generate one image per prompt; item `i` draws all its noise from `ChaCha8Rng(seeds[i])`.
///
/// Returns `[3 * R * R]` images in `[0, 1]`.
pub fn generate_batch(
    model: &Model<f32>,
    schedule: &NoiseSchedule,
    prompts: &[Vec<usize>],
    seeds: &[u64],
    cfg: SamplerConfig,
) -> Result<Vec<Vec<f32>>> {
    if cfg.steps == 0 {
        return Err(Error::Config("sampling needs at least one step".into()));
    }
    if prompts.len() != seeds.len() || prompts.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} prompts for {} seeds", prompts.len(), seeds.len())));
    }
    let r = model.config().resolution;
    let plane = 3 * r * r;
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut x: Vec<f32> = rngs.iter_mut().flat_map(|g| (0..plane).map(|_| StandardNormal.sample(g)).collect::<Vec<f32>>()).collect();
    let grid = timestep_grid(schedule.t_train(), cfg.steps);
    for w in grid.windows(2) {
        let (t, prev) = (w[0], w[1]);
        let pred = guided_prediction(model, &x, prompts, t, cfg.guidance)?;
        match schedule.kind() {
            ScheduleKind::RectifiedFlow => {
                let dt = (schedule.sigma(prev) - schedule.sigma(t)) as f32;
                x.iter_mut().zip(&pred).for_each(|(xi, v)| *xi += dt * v);
            }
            ScheduleKind::DdpmLinear => {
                let (ab_t, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(prev));
                let (sa, sb) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
                let beta = 1.0 - ab_t / ab_prev;
                let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
                let ct = (ab_t / ab_prev).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
                let std = ((1.0 - ab_prev) / (1.0 - ab_t) * beta).sqrt();
                for (i, (xi, e)) in x.iter_mut().zip(&pred).enumerate() {
                    let x0 = ((*xi as f64 - sb * *e as f64) / sa).clamp(-1.0, 1.0);
                    let next = match cfg.method {
                        SamplerMethod::Ancestral => {
                            let mut next = c0 * x0 + ct * *xi as f64;
                            if prev > 0 {
                                let z: f64 = StandardNormal.sample(&mut rngs[i / plane]);
                                next += std * z;
                            }
                            next
                        }
                        SamplerMethod::Ddim => {
                            let eps = (*xi as f64 - sa * x0) / sb;
                            ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * eps
                        }
                    };
                    *xi = next as f32;
                }
            }
        }
    }
    Ok(x.chunks(plane).map(|c| from_model_range(c).into_iter().map(|v| v.clamp(0.0, 1.0)).collect()).collect())
}

/// Generate a single image.
pub fn generate(model: &Model<f32>, schedule: &NoiseSchedule, prompt: &[usize], seed: u64, cfg: SamplerConfig) -> Result<Vec<f32>> {
    Ok(generate_batch(model, schedule, &[prompt.to_vec()], &[seed], cfg)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_and_guidance() {
        assert_eq!(timestep_grid(1000, 4), vec![1000, 750, 500, 250, 0]);
        assert_eq!(timestep_grid(3, 10), vec![3, 2, 1, 0]);
        assert_eq!(guide(0.7, -3.0, 1.0), 0.7);
        assert_eq!(guide(1.0, 0.0, 3.0), 3.0);
    }
}
