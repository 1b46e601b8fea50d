//! Measurement: IoU-vs-timestep curves, generation with the binding oracle,
//! the diversity proxy, autoencoder health, and report emission.

pub mod diversity;
pub mod iou;
pub mod oracle;
pub mod render;
pub mod sample;

use std::path::Path;

use ctcal_autodiff::{Graph, Tensor};
use serde::{Deserialize, Serialize};

pub use diversity::diversity_score;
pub use iou::{fig_timesteps, iou_vs_timestep, soft_iou, spearman, IoUCurve};
pub use oracle::{binding_oracle, BindingAccuracy, Verdicts};
pub use render::{plot_curve, render_heatmaps};
pub use sample::{generate, generate_batch, SamplerConfig};

use crate::diffusion::{add_noise, to_model_range, NoiseSchedule};
use crate::error::{Error, Result};
use crate::loss::AttnAutoencoder;
use crate::model::{AttnMap, Branch, Model};
use crate::scene::{sample_seed, Palette, SceneSample};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub sampler: SamplerConfig,
    /// Prompts judged by the binding oracle, one image each.
    pub prompts: usize,
    /// Timesteps of the IoU curve; `t/T` in `{0.05, ..., 0.95}` when absent.
    pub curve_timesteps: Option<Vec<usize>>,
    pub curve_samples: usize,
    pub seeds: Vec<u64>,
    /// Prompts used for the diversity proxy and images generated for each.
    pub diversity_prompts: usize,
    pub diversity_images: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            prompts: 200,
            curve_timesteps: None,
            curve_samples: 64,
            seeds: vec![0, 1],
            diversity_prompts: 4,
            diversity_images: 8,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sampler.steps == 0 || !self.sampler.guidance.is_finite() {
            return Err(Error::Config(format!("invalid sampler settings {:?}", self.sampler)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one curve seed is required".into()));
        }
        if let Some(t) = &self.curve_timesteps {
            if t.is_empty() || t.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidTimesteps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub run_id: String,
    pub created: String,
    pub binding: BindingAccuracy,
    pub iou_curve: IoUCurve,
    pub spearman: f64,
    /// Mean curve value over `t >= 0.7 T`.
    pub iou_high_t: Option<f64>,
    pub diversity_proxy: Option<f64>,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Every metric inside its declared range.
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let b = &self.binding;
        let ok = unit(b.color_binding)
            && unit(b.two_object)
            && unit(b.spatial)
            && unit(b.two_object_color_binding)
            && self.iou_curve.mean.iter().all(|&v| unit(v))
            && (-1.0..=1.0).contains(&self.spearman)
            && self.iou_high_t.is_none_or(unit)
            && self.diversity_proxy.is_none_or(|d| (0.0..=2.0).contains(&d))
            && self.iou_curve.timesteps.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("report metrics outside their ranges".into()))
        }
    }
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    report.validate()?;
    crate::model::params::write_atomic(path, serde_json::to_string_pretty(report)?.as_bytes())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if report.version != REPORT_VERSION {
        return Err(Error::VersionMismatch { found: report.version, expected: REPORT_VERSION });
    }
    report.validate()?;
    Ok(report)
}

/// Generated images judged by the oracle, plus the images themselves.
pub struct BindingRun {
    pub accuracy: BindingAccuracy,
    pub verdicts: Vec<Verdicts>,
    pub images: Vec<Vec<f32>>,
}

const GEN_BATCH: usize = 32;

/// One image per prompt of `samples`, seeded per prompt, judged against its prompt.
pub fn binding_eval(
    model: &Model<f32>,
    schedule: &NoiseSchedule,
    samples: &[SceneSample],
    palette: &Palette,
    sampler: SamplerConfig,
    seed: u64,
) -> Result<BindingRun> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let r = model.config().resolution;
    let mut images = Vec::with_capacity(samples.len());
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(GEN_BATCH) {
        let prompts: Vec<Vec<usize>> = chunk.iter().map(|&i| samples[i].prompt.token_ids()).collect();
        let seeds: Vec<u64> = chunk.iter().map(|&i| sample_seed(seed, i)).collect();
        images.extend(generate_batch(model, schedule, &prompts, &seeds, sampler)?);
    }
    let verdicts: Vec<Verdicts> = images.iter().zip(samples).map(|(img, s)| binding_oracle(img, r, &s.prompt, palette)).collect();
    Ok(BindingRun { accuracy: BindingAccuracy::from_verdicts(&verdicts), verdicts, images })
}

/// Diversity proxy averaged over prompts.
pub fn diversity_eval(
    model: &Model<f32>,
    schedule: &NoiseSchedule,
    samples: &[SceneSample],
    images_per_prompt: usize,
    sampler: SamplerConfig,
    seed: u64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let r = model.config().resolution;
    let mut total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let prompts = vec![s.prompt.token_ids(); images_per_prompt];
        let seeds: Vec<u64> = (0..images_per_prompt).map(|k| sample_seed(sample_seed(seed, i), k)).collect();
        let imgs = generate_batch(model, schedule, &prompts, &seeds, sampler)?;
        total += diversity_score(&imgs, r)?;
    }
    Ok(total / samples.len() as f64)
}

/// Curve, binding accuracy and diversity for one model.
pub fn evaluate(
    model: &Model<f32>,
    schedule: &NoiseSchedule,
    samples: &[SceneSample],
    palette: &Palette,
    cfg: &EvalConfig,
    run_id: &str,
) -> Result<EvalReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let timesteps = cfg.curve_timesteps.clone().unwrap_or_else(|| fig_timesteps(schedule.t_train()));
    let curve_set = &samples[..cfg.curve_samples.clamp(1, samples.len())];
    let curve = iou_vs_timestep(model, schedule, curve_set, &timesteps, &cfg.seeds)?;
    let binding = binding_eval(model, schedule, &samples[..cfg.prompts.clamp(1, samples.len())], palette, cfg.sampler, cfg.seed)?;
    let diversity = if cfg.diversity_prompts > 0 && cfg.diversity_images >= 2 {
        let set = &samples[..cfg.diversity_prompts.min(samples.len())];
        Some(diversity_eval(model, schedule, set, cfg.diversity_images, cfg.sampler, cfg.seed)?)
    } else {
        None
    };
    Ok(EvalReport {
        version: REPORT_VERSION,
        run_id: run_id.to_string(),
        created: chrono::Utc::now().to_rfc3339(),
        binding: binding.accuracy,
        spearman: curve.spearman(),
        iou_high_t: curve.mean_above(0.7),
        iou_curve: curve,
        diversity_proxy: diversity,
        config: serde_json::to_value(cfg)?,
    })
}

/// Aggregated attention of one prompt on image `x0` (in `[0, 1]`) noised to `t`.
pub fn attention_at(
    model: &Model<f32>,
    schedule: &NoiseSchedule,
    x0: &[f32],
    tokens: &[usize],
    t: usize,
    noise_seed: u64,
) -> Result<AttnMap<f32>> {
    let r = model.config().resolution;
    if x0.len() != 3 * r * r {
        return Err(Error::ShapeMismatch(format!("image with {} values for resolution {r}", x0.len())));
    }
    let x0 = to_model_range(x0);
    let eps = iou::eval_noise(noise_seed, 0, x0.len());
    let xt = add_noise(&x0, &eps, t, schedule)?;
    let mut g = Graph::<f32>::new();
    let p = model.params.bind(&mut g, false);
    let x = g.constant(Tensor::new(&[1, 3, r, r], xt)?);
    let out = model.forward(&mut g, &p, x, &[tokens.to_vec()], &[t], Branch::Eval)?;
    let a = model.aggregate(&mut g, &out.records, 0)?;
    Ok(AttnMap { values: g.value(a).clone(), branch: Branch::Eval, timestep: t })
}

/// Reconstruction and latent spread of an autoencoder on real attention maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AeHealth {
    pub recon_initial: f64,
    pub recon_final: f64,
    /// Mean pairwise Euclidean distance between latents of distinct maps.
    pub latent_distance: f64,
    pub maps: usize,
}

impl AeHealth {
    pub fn recon_ratio(&self) -> f64 {
        self.recon_final / self.recon_initial
    }
}

/// Noun maps of `samples` at timestep `t`, up to `limit` of them, as `[HW]` rows.
pub fn noun_maps(model: &Model<f32>, schedule: &NoiseSchedule, samples: &[SceneSample], t: usize, limit: usize) -> Result<Vec<Vec<f32>>> {
    let mut maps: Vec<Vec<f32>> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if maps.len() >= limit {
            break;
        }
        let a = attention_at(model, schedule, &s.image, &s.prompt.token_ids(), t, sample_seed(17, i))?;
        for m in &s.masks {
            let slice = a.slice(m.position);
            if maps.len() < limit && !maps.contains(&slice) {
                maps.push(slice);
            }
        }
    }
    Ok(maps)
}

fn recon_and_latents(ae: &AttnAutoencoder<f32>, maps: &[Vec<f32>]) -> Result<(f64, Vec<Vec<f32>>)> {
    let hw = maps[0].len();
    let mut g = Graph::<f32>::new();
    let p = ae.params.bind(&mut g, false);
    let x = g.constant(Tensor::new(&[maps.len(), hw], maps.concat())?);
    let z = ae.encode(&mut g, &p, x);
    let y = ae.decode(&mut g, &p, z);
    let loss = g.mse(y, x);
    let zd = g.value(z);
    let k = zd.shape()[1];
    Ok((g.value(loss).item() as f64, zd.data().chunks(k).map(<[f32]>::to_vec).collect()))
}

/// Compare the autoencoder before and after training on the trained model's teacher-timestep maps.
pub fn autoencoder_health(
    model: &Model<f32>,
    schedule: &NoiseSchedule,
    initial: &AttnAutoencoder<f32>,
    trained: &AttnAutoencoder<f32>,
    samples: &[SceneSample],
    t_tea: usize,
    n_maps: usize,
) -> Result<AeHealth> {
    let maps = noun_maps(model, schedule, samples, t_tea, n_maps)?;
    if maps.len() < 2 {
        return Err(Error::EmptyDataset);
    }
    let (recon_initial, _) = recon_and_latents(initial, &maps)?;
    let (recon_final, z) = recon_and_latents(trained, &maps)?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..z.len() {
        for j in i + 1..z.len() {
            total += z[i].iter().zip(&z[j]).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
            pairs += 1;
        }
    }
    Ok(AeHealth { recon_initial, recon_final, latent_distance: total / pairs as f64, maps: maps.len() })
}
