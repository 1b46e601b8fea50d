//! Training configuration, mode wiring, and `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{SamplerKind, ScheduleKind, TeacherStrategy, DEFAULT_T_TRAIN};
use crate::error::{Error, Result};
use crate::loss::{AutoencoderConfig, CtcalWeights, TermSet};
use crate::model::lora::AdapterConfig;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Ctcal,
    A,
    B,
    C,
    D,
    E,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown mode `{s}` (expected baseline, ctcal, a, b, c, d or e)")))
    }
}

/// Loss terms, token selection and timestep weighting implied by a mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Wiring {
    pub terms: TermSet,
    /// Align every token instead of the noun subset.
    pub all_tokens: bool,
    /// Scale calibration by `t_stu / T`; otherwise by 1.
    pub timestep_weighting: bool,
}

impl Wiring {
    pub fn uses_teacher(&self) -> bool {
        self.terms != TermSet::NONE
    }

    pub fn uses_autoencoder(&self) -> bool {
        self.terms.semantic || self.terms.reconstruction
    }
}

pub fn mode_wiring(mode: Mode) -> Wiring {
    let pixel_only = TermSet { pixel: true, ..TermSet::NONE };
    let with_ae = TermSet { semantic: true, reconstruction: true, ..pixel_only };
    let (terms, all_tokens, timestep_weighting) = match mode {
        Mode::Baseline => (TermSet::NONE, false, false),
        Mode::A => (pixel_only, true, false),
        Mode::B => (pixel_only, false, false),
        Mode::C => (with_ae, false, false),
        Mode::D => (TermSet::ALL, false, false),
        Mode::E | Mode::Ctcal => (TermSet::ALL, false, true),
    };
    Wiring { terms, all_tokens, timestep_weighting }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CtcalConfig {
    #[serde(flatten)]
    pub weights: CtcalWeights,
    pub autoencoder: AutoencoderConfig,
    /// Let the semantic term update the encoder (otherwise it sees a frozen copy).
    pub semantic_updates_encoder: bool,
    /// Also align adjective tokens.
    pub include_adjectives: bool,
}

impl Default for CtcalConfig {
    fn default() -> Self {
        Self {
            weights: CtcalWeights::default(),
            autoencoder: AutoencoderConfig::default(),
            semantic_updates_encoder: true,
            include_adjectives: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleKind,
    pub t_train: usize,
    pub sampler: SamplerKind,
    /// Teacher timestep rule; the schedule's default when absent.
    pub teacher: Option<TeacherStrategy>,
    pub ctcal: CtcalConfig,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub mode: Mode,
    pub adapter: Option<AdapterConfig>,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            schedule: ScheduleKind::DdpmLinear,
            t_train: DEFAULT_T_TRAIN,
            sampler: SamplerKind::Uniform,
            teacher: None,
            ctcal: CtcalConfig::default(),
            optimizer: AdamConfig::default(),
            batch_size: 4,
            steps: 10_000,
            seed: 0,
            mode: Mode::Ctcal,
            adapter: None,
            checkpoint_every: 1000,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn teacher_strategy(&self) -> TeacherStrategy {
        self.teacher.unwrap_or_else(|| TeacherStrategy::default_for(self.schedule))
    }

    pub fn wiring(&self) -> Wiring {
        mode_wiring(self.mode)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.ctcal.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.t_train < 2 {
            return Err(Error::Config("t_train must be at least 2".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        if let Some(a) = self.adapter {
            if a.rank == 0 {
                return Err(Error::Config("adapter rank must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Apply `dotted.key=value` overrides; values parse as JSON, falling back to a string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn apply_override(doc: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| serde_json::json!({}));
        if node.is_null() {
            *node = serde_json::json!({});
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_wiring() {
        let a = mode_wiring(Mode::A);
        assert!(a.all_tokens && a.terms.pixel && !a.terms.semantic && !a.timestep_weighting);
        let b = mode_wiring(Mode::B);
        assert!(!b.all_tokens && b.terms == TermSet { pixel: true, ..TermSet::NONE });
        let c = mode_wiring(Mode::C);
        assert!(c.terms.semantic && c.terms.reconstruction && !c.terms.subject_reg);
        let d = mode_wiring(Mode::D);
        assert!(d.terms == TermSet::ALL && !d.timestep_weighting);
        assert_eq!(mode_wiring(Mode::E), mode_wiring(Mode::Ctcal));
        assert!(mode_wiring(Mode::E).timestep_weighting);
        assert!(!mode_wiring(Mode::Baseline).uses_teacher());
    }

    #[test]
    fn json_round_trip_and_overrides() {
        let cfg = TrainConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
        let o = cfg
            .with_overrides(&["steps=12".into(), "ctcal.lambda2=0.25".into(), "mode=b".into(), "teacher=uniform_below".into()])
            .unwrap();
        assert_eq!(o.steps, 12);
        assert_eq!(o.ctcal.weights.lambda2, 0.25);
        assert_eq!(o.mode, Mode::B);
        assert_eq!(o.teacher, Some(TeacherStrategy::UniformBelow));
        assert!(cfg.with_overrides(&["mode=z".into()]).is_err());
        assert!(cfg.with_overrides(&["batch_size=0".into()]).is_err());
        assert!(TrainConfig::from_json("{}").is_ok());
    }
}
