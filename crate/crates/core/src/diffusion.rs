//! Noise schedules, the forward noising process, prediction targets, and timestep samplers.

use ctcal_autodiff::Real;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_T_TRAIN: usize = 1000;
const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 2e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    DdpmLinear,
    RectifiedFlow,
}

/// Per-timestep coefficients of `x_t = a_t * x0 + b_t * eps` for integer `t` in `0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    t_train: usize,
    /// DDPM: cumulative alpha-bar. RF: sigma = t / T.
    table: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, t_train: usize) -> Result<Self> {
        if t_train < 2 {
            return Err(Error::Config(format!("T_train must be at least 2, got {t_train}")));
        }
        let table = match kind {
            ScheduleKind::DdpmLinear => {
                let mut ab = Vec::with_capacity(t_train + 1);
                ab.push(1.0);
                let mut acc = 1.0f64;
                for t in 1..=t_train {
                    let beta = BETA_START + (BETA_END - BETA_START) * (t - 1) as f64 / (t_train - 1) as f64;
                    acc *= 1.0 - beta;
                    ab.push(acc);
                }
                ab
            }
            ScheduleKind::RectifiedFlow => (0..=t_train).map(|t| t as f64 / t_train as f64).collect(),
        };
        Ok(Self { kind, t_train, table })
    }

    pub fn ddpm(t_train: usize) -> Self {
        Self::new(ScheduleKind::DdpmLinear, t_train).expect("valid T")
    }

    pub fn rectified_flow(t_train: usize) -> Self {
        Self::new(ScheduleKind::RectifiedFlow, t_train).expect("valid T")
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn t_train(&self) -> usize {
        self.t_train
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_train {
            return Err(Error::InvalidTimestep { t, lo: 0, hi: self.t_train });
        }
        Ok(())
    }

    /// Cumulative signal fraction; DDPM only (RF returns `(1 - sigma)^2`).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        match self.kind {
            ScheduleKind::DdpmLinear => self.table[t],
            ScheduleKind::RectifiedFlow => (1.0 - self.table[t]).powi(2),
        }
    }

    /// RF noise level `t / T`.
    pub fn sigma(&self, t: usize) -> f64 {
        match self.kind {
            ScheduleKind::DdpmLinear => (1.0 - self.table[t]).sqrt(),
            ScheduleKind::RectifiedFlow => self.table[t],
        }
    }

    /// `(a_t, b_t)` such that `x_t = a_t * x0 + b_t * eps`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        match self.kind {
            ScheduleKind::DdpmLinear => (self.table[t].sqrt(), (1.0 - self.table[t]).sqrt()),
            ScheduleKind::RectifiedFlow => (1.0 - self.table[t], self.table[t]),
        }
    }
}

fn check_same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("x0 has {a} elements, eps has {b}")));
    }
    Ok(())
}

pub fn add_noise<T: Real>(x0: &[T], eps: &[T], t: usize, schedule: &NoiseSchedule) -> Result<Vec<T>> {
    check_same_len(x0.len(), eps.len())?;
    schedule.check_t(t)?;
    let (a, b) = schedule.coefficients(t);
    let (a, b) = (T::from_f64_lossy(a), T::from_f64_lossy(b));
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}

/// Regression target: `eps` for DDPM, velocity `eps - x0` for rectified flow.
pub fn prediction_target<T: Real>(x0: &[T], eps: &[T], t: usize, schedule: &NoiseSchedule) -> Result<Vec<T>> {
    check_same_len(x0.len(), eps.len())?;
    schedule.check_t(t)?;
    Ok(match schedule.kind {
        ScheduleKind::DdpmLinear => eps.to_vec(),
        ScheduleKind::RectifiedFlow => x0.iter().zip(eps).map(|(&x, &e)| e - x).collect(),
    })
}

/// Uniformly weighted mean squared error.
pub fn diffusion_loss<T: Real>(pred: &[T], target: &[T]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch(format!("pred has {} elements, target {}", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pred.iter().zip(target).map(|(&p, &q)| (p.as_f64() - q.as_f64()).powi(2)).sum();
    Ok(s / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerKind {
    Uniform,
    LogitNormal { mu: f64, s: f64 },
}

impl SamplerKind {
    pub fn logit_normal_default() -> Self {
        SamplerKind::LogitNormal { mu: 0.0, s: 1.0 }
    }

    /// Density on normalized time `u` in `[0, 1]`; the logit-normal vanishes at both ends.
    pub fn density(&self, u: f64) -> f64 {
        match *self {
            SamplerKind::Uniform => 1.0,
            SamplerKind::LogitNormal { mu, s } => {
                if u <= 0.0 || u >= 1.0 {
                    return 0.0;
                }
                let z = (u / (1.0 - u)).ln();
                (-(z - mu).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt() * u * (1.0 - u))
            }
        }
    }
}

/// Draws `t_stu` in `1..=T`.
#[derive(Debug, Clone)]
pub struct TimestepSampler {
    kind: SamplerKind,
    t_train: usize,
    /// Cumulative weights over `t = 1..=T` (logit-normal only).
    cdf: Vec<f64>,
}

impl TimestepSampler {
    pub fn new(kind: SamplerKind, t_train: usize) -> Result<Self> {
        if let SamplerKind::LogitNormal { mu, s } = kind {
            if !(mu.is_finite() && s.is_finite() && s > 0.0) {
                return Err(Error::Config(format!("logit-normal parameters mu={mu}, s={s}")));
            }
        }
        let cdf = match kind {
            SamplerKind::Uniform => Vec::new(),
            SamplerKind::LogitNormal { .. } => {
                let mut acc = 0.0;
                let mut cdf: Vec<f64> = (1..=t_train)
                    .map(|t| {
                        acc += kind.density(t as f64 / t_train as f64);
                        acc
                    })
                    .collect();
                // t = T has zero density; keep it reachable only if every weight vanished
                let total = acc.max(f64::MIN_POSITIVE);
                cdf.iter_mut().for_each(|c| *c /= total);
                cdf
            }
        };
        Ok(Self { kind, t_train, cdf })
    }

    pub fn kind(&self) -> SamplerKind {
        self.kind
    }

    pub fn t_train(&self) -> usize {
        self.t_train
    }

    pub fn sample_t_stu<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self.kind {
            SamplerKind::Uniform => rng.random_range(1..=self.t_train),
            SamplerKind::LogitNormal { .. } => {
                let u: f64 = rng.random();
                let idx = self.cdf.partition_point(|&c| c <= u);
                idx.min(self.t_train - 1) + 1
            }
        }
    }

    /// Density at integer timestep `t`, on normalized time `t / T`.
    pub fn density_at(&self, t: usize) -> f64 {
        self.kind.density(t as f64 / self.t_train as f64)
    }

    /// `argmax_{t < t_stu}` of the density; ties go to the smallest `t`.
    pub fn density_mode_below(&self, t_stu: usize) -> usize {
        let mut best = 0;
        let mut best_density = self.density_at(0);
        for t in 1..t_stu {
            let d = self.density_at(t);
            if d > best_density {
                best = t;
                best_density = d;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherStrategy {
    FixedZero,
    DensityMode,
    UniformBelow,
}

impl TeacherStrategy {
    /// Default for a schedule: fixed zero for DDPM, density mode for rectified flow.
    pub fn default_for(kind: ScheduleKind) -> Self {
        match kind {
            ScheduleKind::DdpmLinear => TeacherStrategy::FixedZero,
            ScheduleKind::RectifiedFlow => TeacherStrategy::DensityMode,
        }
    }
}

impl std::str::FromStr for TeacherStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed_zero" => Ok(Self::FixedZero),
            "density_mode" => Ok(Self::DensityMode),
            "uniform_below" => Ok(Self::UniformBelow),
            other => Err(Error::InvalidStrategy(other.to_string())),
        }
    }
}

pub fn sample_t_tea<R: Rng + ?Sized>(
    strategy: TeacherStrategy,
    t_stu: usize,
    sampler: &TimestepSampler,
    rng: &mut R,
) -> Result<usize> {
    if t_stu == 0 || t_stu > sampler.t_train {
        return Err(Error::InvalidTimestep { t: t_stu, lo: 1, hi: sampler.t_train });
    }
    Ok(match strategy {
        TeacherStrategy::FixedZero => 0,
        TeacherStrategy::DensityMode => sampler.density_mode_below(t_stu),
        TeacherStrategy::UniformBelow => rng.random_range(0..t_stu),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepPair {
    pub t_stu: usize,
    pub t_tea: usize,
}

impl TimestepPair {
    pub fn new(t_stu: usize, t_tea: usize, t_train: usize) -> Result<Self> {
        if t_tea >= t_stu || t_stu > t_train {
            return Err(Error::InvalidTimesteps);
        }
        Ok(Self { t_stu, t_tea })
    }

    /// Draw a student timestep and its teacher.
    pub fn sample<R: Rng + ?Sized>(sampler: &TimestepSampler, strategy: TeacherStrategy, rng: &mut R) -> Self {
        let t_stu = sampler.sample_t_stu(rng);
        let t_tea = sample_t_tea(strategy, t_stu, sampler, rng).expect("sampler support is 1..=T");
        Self { t_stu, t_tea }
    }
}

/// Map `[0, 1]` pixels to the model's `[-1, 1]` range.
pub fn to_model_range(image: &[f32]) -> Vec<f32> {
    image.iter().map(|&v| 2.0 * v - 1.0).collect()
}

pub fn from_model_range(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect()
}
