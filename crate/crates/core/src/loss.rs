//! Calibration losses on aggregated attention maps.
//!
//! Maps are graph variables of shape `[H, W, n]`. Teacher maps are expected to
//! be detached by the caller; the reconstruction term detaches again so that
//! its gradient can only reach the autoencoder.

use ctcal_autodiff::{Broadcast, Graph, Real, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::{Conv, Linear};
use crate::model::params::{Bound, Init, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CtcalWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub tau: f64,
}

impl Default for CtcalWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 0.5, lambda3: 0.5, lambda4: 0.1, tau: 0.1 }
    }
}

impl CtcalWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {ws:?}")));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        Ok(())
    }
}

/// Per-term values of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub diffusion: f64,
    pub pixel: f64,
    pub semantic: f64,
    pub reconstruction: f64,
    pub subject_reg: f64,
    pub lambda_t: f64,
    pub total: f64,
}

/// Linear timestep weight `t_stu / T`.
pub fn timestep_weight(t_stu: usize, t_train: usize) -> f64 {
    t_stu as f64 / t_train as f64
}

/// `total = diffusion + (t_stu / T) * ctcal`.
pub fn compose_objective(diffusion: f64, ctcal: f64, t_stu: usize, t_train: usize) -> Result<f64> {
    compose_with_weight(diffusion, ctcal, timestep_weight(t_stu, t_train))
}

pub fn compose_with_weight(diffusion: f64, ctcal: f64, lambda_t: f64) -> Result<f64> {
    let total = diffusion + lambda_t * ctcal;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoencoderArch {
    /// Two stride-2 convolutions and a linear bottleneck, mirrored in the decoder.
    Conv,
    /// One linear map each way.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderConfig {
    pub arch: AutoencoderArch,
    pub latent: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self { arch: AutoencoderArch::Conv, latent: 32 }
    }
}

#[derive(Debug, Clone)]
enum AeLayers {
    Conv { e1: Conv, e2: Conv, e3: Linear, d1: Linear, d2: Conv, d3: Conv },
    Linear { enc: Linear, dec: Linear },
}

/// Encoder/decoder over single-channel `[H, W]` attention maps.
#[derive(Debug, Clone)]
pub struct AttnAutoencoder<T> {
    pub config: AutoencoderConfig,
    pub resolution: usize,
    layers: AeLayers,
    pub params: ParamStore<T>,
}

impl<T: Real> AttnAutoencoder<T> {
    pub fn new(config: AutoencoderConfig, resolution: usize, seed: u64) -> Result<Self> {
        if config.latent == 0 {
            return Err(Error::Config("autoencoder latent size must be positive".into()));
        }
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, seed);
        let hw = resolution * resolution;
        let layers = match config.arch {
            AutoencoderArch::Conv => {
                if !resolution.is_multiple_of(4) {
                    return Err(Error::Config(format!("conv autoencoder needs a resolution divisible by 4, got {resolution}")));
                }
                let q = resolution / 4;
                AeLayers::Conv {
                    e1: Conv::new(&mut init, "ae.enc1", 1, 8, 3, 2, 1.0),
                    e2: Conv::new(&mut init, "ae.enc2", 8, 16, 3, 2, 1.0),
                    e3: Linear::new(&mut init, "ae.enc3", 16 * q * q, config.latent, true, 1.0),
                    d1: Linear::new(&mut init, "ae.dec1", config.latent, 16 * q * q, true, 1.0),
                    d2: Conv::new(&mut init, "ae.dec2", 16, 8, 3, 1, 1.0),
                    d3: Conv::new(&mut init, "ae.dec3", 8, 1, 3, 1, 1.0),
                }
            }
            AutoencoderArch::Linear => AeLayers::Linear {
                enc: Linear::new(&mut init, "ae.enc", hw, config.latent, true, 1.0),
                dec: Linear::new(&mut init, "ae.dec", config.latent, hw, true, 1.0),
            },
        };
        Ok(Self { config, resolution, layers, params })
    }

    pub fn cast<U: Real>(&self) -> AttnAutoencoder<U> {
        AttnAutoencoder { config: self.config, resolution: self.resolution, layers: self.layers.clone(), params: self.params.cast() }
    }

    pub fn with_params(mut self, params: ParamStore<T>) -> Result<Self> {
        if !self.params.same_layout(&params) {
            return Err(Error::ShapeMismatch("autoencoder parameter layout mismatch".into()));
        }
        self.params = params;
        Ok(self)
    }

    /// Maps `[N, H * W]` to latents `[N, z]`.
    pub fn encode(&self, g: &mut Graph<T>, p: &Bound, maps: Var) -> Var {
        let n = g.shape(maps)[0];
        let r = self.resolution;
        match &self.layers {
            AeLayers::Conv { e1, e2, e3, .. } => {
                let x = g.reshape(maps, &[n, 1, r, r]);
                let h = e1.apply(g, p, x);
                let h = g.silu(h);
                let h = e2.apply(g, p, h);
                let h = g.silu(h);
                let flat = g.value(h).len() / n;
                let h = g.reshape(h, &[n, flat]);
                e3.apply(g, p, h)
            }
            AeLayers::Linear { enc, .. } => enc.apply(g, p, maps),
        }
    }

    /// Maps latents `[N, z]` back to `[N, H * W]`.
    pub fn decode(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Var {
        let n = g.shape(z)[0];
        let r = self.resolution;
        match &self.layers {
            AeLayers::Conv { d1, d2, d3, .. } => {
                let q = r / 4;
                let h = d1.apply(g, p, z);
                let h = g.silu(h);
                let h = g.reshape(h, &[n, 16, q, q]);
                let h = g.upsample2x(h);
                let h = d2.apply(g, p, h);
                let h = g.silu(h);
                let h = g.upsample2x(h);
                let h = d3.apply(g, p, h);
                g.reshape(h, &[n, r * r])
            }
            AeLayers::Linear { dec, .. } => dec.apply(g, p, z),
        }
    }

    pub fn encoder_param_names(&self) -> Vec<String> {
        self.params.names().iter().filter(|n| n.starts_with("ae.enc")).cloned().collect()
    }
}

/// Autoencoder parameters bound twice: as leaves, and as constants for a frozen-encoder view.
pub struct AeBinding {
    pub live: Bound,
    pub frozen: Bound,
}

impl AeBinding {
    pub fn new<T: Real>(g: &mut Graph<T>, ae: &AttnAutoencoder<T>, trainable: bool) -> Self {
        let live = ae.params.bind(g, trainable);
        let frozen = ae.params.bind(g, false);
        Self { live, frozen }
    }
}

fn check_maps<T: Real>(g: &Graph<T>, a: Var, b: Option<Var>, nouns: &[usize]) -> Result<(usize, usize)> {
    let s = g.shape(a);
    if s.len() != 3 {
        return Err(Error::ShapeMismatch(format!("attention map {s:?} is not [H, W, n]")));
    }
    if let Some(b) = b {
        if g.shape(b) != s {
            return Err(Error::ShapeMismatch(format!("student {s:?} vs teacher {:?}", g.shape(b))));
        }
    }
    if nouns.is_empty() {
        return Err(Error::NoNounTokens);
    }
    if let Some(&i) = nouns.iter().find(|&&i| i >= s[2]) {
        return Err(Error::ShapeMismatch(format!("token index {i} outside a map with {} tokens", s[2])));
    }
    Ok((s[0] * s[1], s[2]))
}

/// Selected token slices as rows: `[H, W, n] -> [N, H * W]`.
pub fn token_slices<T: Real>(g: &mut Graph<T>, a: Var, nouns: &[usize]) -> Result<Var> {
    let (hw, _) = check_maps(g, a, None, nouns)?;
    let sel = g.select_last(a, nouns);
    let sel = g.reshape(sel, &[hw, nouns.len()]);
    Ok(g.transpose(sel))
}

/// Mean over selected tokens of the per-slice MSE.
pub fn pixel_loss<T: Real>(g: &mut Graph<T>, a_stu: Var, a_tea: Var, nouns: &[usize]) -> Result<Var> {
    check_maps(g, a_stu, Some(a_tea), nouns)?;
    let s = g.select_last(a_stu, nouns);
    let t = g.select_last(a_tea, nouns);
    // all slices share one size, so the pooled MSE equals the mean of per-slice MSEs
    Ok(g.mse(s, t))
}

/// Latent-space MSE; the teacher's encoding is a constant.
pub fn semantic_loss<T: Real>(
    g: &mut Graph<T>,
    ae: &AttnAutoencoder<T>,
    bind: &AeBinding,
    a_stu: Var,
    a_tea: Var,
    nouns: &[usize],
    update_encoder: bool,
) -> Result<Var> {
    check_maps(g, a_stu, Some(a_tea), nouns)?;
    let enc_params = if update_encoder { &bind.live } else { &bind.frozen };
    let xs = token_slices(g, a_stu, nouns)?;
    let xt = token_slices(g, a_tea, nouns)?;
    let zs = ae.encode(g, enc_params, xs);
    let zt = ae.encode(g, &bind.frozen, xt);
    let zt = g.detach(zt);
    Ok(g.mse(zs, zt))
}

/// Autoencoder reconstruction of the teacher slices; gradient reaches only the autoencoder.
pub fn recon_proxy_loss<T: Real>(
    g: &mut Graph<T>,
    ae: &AttnAutoencoder<T>,
    bind: &AeBinding,
    a_tea: Var,
    nouns: &[usize],
) -> Result<Var> {
    let a_tea = g.detach(a_tea);
    let x = token_slices(g, a_tea, nouns)?;
    let z = ae.encode(g, &bind.live, x);
    let y = ae.decode(g, &bind.live, z);
    Ok(g.mse(y, x))
}

/// Mean over subjects of `relu(S - max_i - tau)`, `S` the largest subject maximum.
pub fn subject_regularizer<T: Real>(g: &mut Graph<T>, a_stu: Var, nouns: &[usize], tau: f64) -> Result<Var> {
    let (hw, _) = check_maps(g, a_stu, None, nouns)?;
    let sel = g.select_last(a_stu, nouns);
    let sel = g.reshape(sel, &[hw, nouns.len()]);
    let maxima = g.max_axis0(sel);
    let s = g.max_all(maxima);
    let neg = g.scale(maxima, -T::one());
    let gap = g.broadcast_add(neg, s, Broadcast::scalar(nouns.len()));
    let gap = g.add_scalar(gap, T::from_f64_lossy(-tau));
    let r = g.relu(gap);
    Ok(g.mean(r))
}

/// Graph handles of the four calibration terms; absent terms are switched off.
#[derive(Debug, Clone, Copy, Default)]
pub struct CtcalTerms {
    pub pixel: Option<Var>,
    pub semantic: Option<Var>,
    pub reconstruction: Option<Var>,
    pub subject_reg: Option<Var>,
}

impl CtcalTerms {
    /// `lambda1 * pixel + lambda2 * semantic + lambda3 * recon + lambda4 * reg`, or `None` if no term is active.
    pub fn weighted_sum<T: Real>(&self, g: &mut Graph<T>, w: &CtcalWeights) -> Option<Var> {
        let parts = [(self.pixel, w.lambda1), (self.semantic, w.lambda2), (self.reconstruction, w.lambda3), (self.subject_reg, w.lambda4)];
        let mut acc: Option<Var> = None;
        for (term, weight) in parts {
            if let Some(v) = term {
                let v = g.scale(v, T::from_f64_lossy(weight));
                acc = Some(match acc {
                    Some(a) => g.add(a, v),
                    None => v,
                });
            }
        }
        acc
    }

    pub fn values<T: Real>(&self, g: &Graph<T>) -> [f64; 4] {
        let v = |t: Option<Var>| t.map_or(0.0, |v| g.value(v).item().as_f64());
        [v(self.pixel), v(self.semantic), v(self.reconstruction), v(self.subject_reg)]
    }
}

/// Which terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermSet {
    pub pixel: bool,
    pub semantic: bool,
    pub reconstruction: bool,
    pub subject_reg: bool,
}

impl TermSet {
    pub const ALL: TermSet = TermSet { pixel: true, semantic: true, reconstruction: true, subject_reg: true };
    pub const NONE: TermSet = TermSet { pixel: false, semantic: false, reconstruction: false, subject_reg: false };
}

/// Build every active term for one item.
#[allow(clippy::too_many_arguments)]
pub fn ctcal_terms<T: Real>(
    g: &mut Graph<T>,
    ae: &AttnAutoencoder<T>,
    bind: &AeBinding,
    a_stu: Var,
    a_tea: Var,
    nouns: &[usize],
    weights: &CtcalWeights,
    active: TermSet,
    update_encoder: bool,
) -> Result<CtcalTerms> {
    check_maps(g, a_stu, Some(a_tea), nouns)?;
    Ok(CtcalTerms {
        pixel: if active.pixel { Some(pixel_loss(g, a_stu, a_tea, nouns)?) } else { None },
        semantic: if active.semantic { Some(semantic_loss(g, ae, bind, a_stu, a_tea, nouns, update_encoder)?) } else { None },
        reconstruction: if active.reconstruction { Some(recon_proxy_loss(g, ae, bind, a_tea, nouns)?) } else { None },
        subject_reg: if active.subject_reg { Some(subject_regularizer(g, a_stu, nouns, weights.tau)?) } else { None },
    })
}
