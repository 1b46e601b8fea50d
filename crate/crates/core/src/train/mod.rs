//! Training loop, checkpoints and metrics.
//!
//! A checkpoint directory holds `config.json`, `model.ckpt`, `autoencoder.ckpt`,
//! `optimizer.ckpt`, an optional `adapter.ckpt`, and `state.json` (step count
//! and RNG position). `state.json` is written last, so a partially written
//! checkpoint is never mistaken for a complete one.

pub mod config;
pub mod optim;
pub mod step;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use config::{mode_wiring, AdamConfig, CtcalConfig, Mode, TrainConfig, Wiring};
pub use optim::AdamState;
pub use step::{compute_step, mean_breakdown, StepContext, StepItem, StepOutput, TeacherSource};

use crate::dataset::load_dataset;
use crate::diffusion::{to_model_range, NoiseSchedule, TimestepPair, TimestepSampler};
use crate::error::{Error, Result};
use crate::loss::{AttnAutoencoder, LossBreakdown};
use crate::model::lora::attention_targets;
use crate::model::params::{load_tensors, save_tensors, write_atomic};
use crate::model::{LoraAdapter, Model, ParamStore};
use crate::prompts::{select_content_indices, NounIndexSet};
use crate::scene::SceneSample;

const STATE_VERSION: u32 = 1;

/// A training sample reduced to what the step needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub x0: Vec<f32>,
    pub tokens: Vec<usize>,
    pub align: Vec<usize>,
}

impl PreparedSample {
    pub fn new(sample: &SceneSample, wiring: Wiring, ctcal: &CtcalConfig) -> Result<Self> {
        let tokens = sample.prompt.token_ids();
        let align = if wiring.all_tokens {
            NounIndexSet::all(tokens.len())?
        } else {
            select_content_indices(&sample.prompt.tokens, ctcal.include_adjectives)?
        };
        Ok(Self { x0: to_model_range(&sample.image), tokens, align: align.indices().to_vec() })
    }
}

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub model: Model<f32>,
    pub ae: AttnAutoencoder<f32>,
    pub adapter: Option<LoraAdapter<f32>>,
    pub opt_model: AdamState,
    pub opt_ae: AdamState,
    pub opt_adapter: Option<AdamState>,
    pub rng: ChaCha8Rng,
}

/// Per-step log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub t_stu: Vec<usize>,
    pub t_tea: Vec<usize>,
    pub items: Vec<LossBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct StateFile {
    version: u32,
    step: u64,
    rng: RngState,
    opt_model_counts: Vec<u64>,
    opt_ae_counts: Vec<u64>,
    opt_adapter_counts: Option<Vec<u64>>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex32(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Config(format!("malformed rng seed `{s}`"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

impl TrainState {
    /// Fresh state. Model, autoencoder, adapter and data RNG get distinct seeds derived from `cfg.seed`.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
        let ae = AttnAutoencoder::new(cfg.ctcal.autoencoder, cfg.model.attn_resolution, cfg.seed.wrapping_add(1))?;
        let adapter = match cfg.adapter {
            Some(a) => Some(LoraAdapter::new(&model.params, &attention_targets(&model.params), a, cfg.seed.wrapping_add(2))?),
            None => None,
        };
        let opt_adapter = adapter.as_ref().map(|a| AdamState::new(&a.params));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self { step: 0, opt_model: AdamState::new(&model.params), opt_ae: AdamState::new(&ae.params), opt_adapter, model, ae, adapter, rng })
    }

    pub fn save(&self, cfg: &TrainConfig, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("config.json"), serde_json::to_string_pretty(cfg)?.as_bytes())?;
        self.model.save(&dir.join("model.ckpt"))?;
        save_tensors(&dir.join("autoencoder.ckpt"), serde_json::json!({ "autoencoder": self.ae.config }), &self.ae.params)?;
        let mut opt = ParamStore::new();
        for (prefix, st) in [("model", &self.opt_model), ("autoencoder", &self.opt_ae)] {
            for (_, n, t) in st.to_store(prefix).iter() {
                opt.add(n, t.clone());
            }
        }
        if let (Some(a), Some(st)) = (&self.adapter, &self.opt_adapter) {
            save_tensors(&dir.join("adapter.ckpt"), serde_json::json!({ "adapter": a.config }), &a.params)?;
            for (_, n, t) in st.to_store("adapter").iter() {
                opt.add(n, t.clone());
            }
        }
        save_tensors(&dir.join("optimizer.ckpt"), serde_json::json!({}), &opt)?;
        let state = StateFile {
            version: STATE_VERSION,
            step: self.step,
            rng: RngState {
                seed: hex(&self.rng.get_seed()),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
            opt_model_counts: self.opt_model.counts.clone(),
            opt_ae_counts: self.opt_ae.counts.clone(),
            opt_adapter_counts: self.opt_adapter.as_ref().map(|s| s.counts.clone()),
        };
        write_atomic(&dir.join("state.json"), serde_json::to_string_pretty(&state)?.as_bytes())
    }

    /// Restore a checkpoint directory written by [`TrainState::save`].
    pub fn load(dir: &Path) -> Result<(TrainConfig, Self)> {
        let state_path = dir.join("state.json");
        if !state_path.exists() {
            return Err(Error::UntrainedModel(dir.to_path_buf()));
        }
        let state: StateFile = serde_json::from_str(&fs::read_to_string(&state_path)?)?;
        if state.version != STATE_VERSION {
            return Err(Error::VersionMismatch { found: state.version, expected: STATE_VERSION });
        }
        let cfg = TrainConfig::load(&dir.join("config.json"))?;
        let mut fresh = Self::new(&cfg)?;
        let model = Model::load(&dir.join("model.ckpt"))?;
        if model.config() != &cfg.model {
            return Err(Error::Config("checkpoint model does not match its config".into()));
        }
        fresh.model = model;
        let (_, ae_params) = load_tensors(&dir.join("autoencoder.ckpt"))?;
        fresh.ae = fresh.ae.with_params(ae_params)?;
        let (_, opt) = load_tensors(&dir.join("optimizer.ckpt"))?;
        fresh.opt_model = AdamState::from_store(&opt, "model", &fresh.model.params, state.opt_model_counts)?;
        fresh.opt_ae = AdamState::from_store(&opt, "autoencoder", &fresh.ae.params, state.opt_ae_counts)?;
        if let Some(adapter) = fresh.adapter.as_mut() {
            let (_, params) = load_tensors(&dir.join("adapter.ckpt"))?;
            if !adapter.params.same_layout(&params) {
                return Err(Error::ShapeMismatch("adapter parameter layout mismatch".into()));
            }
            adapter.params = params;
            let counts = state.opt_adapter_counts.ok_or_else(|| Error::Config("missing adapter optimizer counts".into()))?;
            fresh.opt_adapter = Some(AdamState::from_store(&opt, "adapter", &adapter.params, counts)?);
        }
        let mut rng = ChaCha8Rng::from_seed(unhex32(&state.rng.seed)?);
        rng.set_stream(state.rng.stream);
        let pos: u128 = state.rng.word_pos.parse().map_err(|_| Error::Config("malformed rng position".into()))?;
        rng.set_word_pos(pos);
        fresh.rng = rng;
        fresh.step = state.step;
        Ok((cfg, fresh))
    }
}

/// Draws batches and applies updates for one configuration.
pub struct Trainer {
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    sampler: TimestepSampler,
    wiring: Wiring,
    data: Vec<PreparedSample>,
    /// Record parameter hashes of both forwards on every step.
    pub instrument: bool,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, samples: &[SceneSample]) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(s) = samples.iter().find(|s| s.resolution != cfg.model.resolution) {
            return Err(Error::ShapeMismatch(format!("dataset resolution {} vs model {}", s.resolution, cfg.model.resolution)));
        }
        let wiring = cfg.wiring();
        let data = samples.iter().map(|s| PreparedSample::new(s, wiring, &cfg.ctcal)).collect::<Result<_>>()?;
        Ok(Self {
            schedule: NoiseSchedule::new(cfg.schedule, cfg.t_train)?,
            sampler: TimestepSampler::new(cfg.sampler, cfg.t_train)?,
            wiring,
            data,
            cfg,
            instrument: false,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Per item: sample index, noise, then the timestep pair.
    pub fn draw_batch(&self, rng: &mut ChaCha8Rng) -> Vec<StepItem<f32>> {
        let strategy = self.cfg.teacher_strategy();
        (0..self.cfg.batch_size)
            .map(|_| {
                let s = &self.data[rng.random_range(0..self.data.len())];
                let eps: Vec<f32> = (0..s.x0.len()).map(|_| rng.sample(StandardNormal)).collect();
                let pair = TimestepPair::sample(&self.sampler, strategy, rng);
                StepItem { x0: s.x0.clone(), tokens: s.tokens.clone(), align: s.align.clone(), eps, pair }
            })
            .collect()
    }

    /// One optimizer step; returns the log record and the raw step output.
    pub fn step(&self, state: &mut TrainState) -> Result<(StepRecord, StepOutput<f32>)> {
        let items = self.draw_batch(&mut state.rng);
        let ctx = StepContext {
            model: &state.model,
            ae: &state.ae,
            adapter: state.adapter.as_ref(),
            schedule: &self.schedule,
            wiring: self.wiring,
            ctcal: &self.cfg.ctcal,
        };
        let out = compute_step(&ctx, &items, &TeacherSource::Live, self.instrument)
            .map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step: state.step },
                other => other,
            })?;
        let opt = &self.cfg.optimizer;
        if let (Some(adapter), Some(st)) = (state.adapter.as_mut(), state.opt_adapter.as_mut()) {
            st.update(opt, &mut adapter.params, &out.adapter_grads)?;
        } else {
            state.opt_model.update(opt, &mut state.model.params, &out.model_grads)?;
        }
        if self.wiring.uses_autoencoder() {
            state.opt_ae.update(opt, &mut state.ae.params, &out.ae_grads)?;
        }
        let record = StepRecord {
            step: state.step,
            loss: out.mean,
            t_stu: items.iter().map(|i| i.pair.t_stu).collect(),
            t_tea: items.iter().map(|i| i.pair.t_tea).collect(),
            items: out.items.clone(),
        };
        state.step += 1;
        Ok((record, out))
    }

    /// Run until `state.step == cfg.steps`, calling `on_step` after every update.
    pub fn run(&self, state: &mut TrainState, mut on_step: impl FnMut(&TrainState, &StepRecord) -> Result<()>) -> Result<()> {
        while state.step < self.cfg.steps {
            let (record, _) = self.step(state)?;
            on_step(state, &record)?;
        }
        Ok(())
    }
}

/// Outcome of [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: u64,
    pub last: Option<LossBreakdown>,
    pub checkpoint: PathBuf,
}

/// Keep the first `keep` lines of a metrics log, dropping the rest.
fn truncate_metrics(path: &Path, keep: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let lines: Vec<String> = BufReader::new(File::open(path)?).lines().take(keep as usize).collect::<std::io::Result<_>>()?;
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Train from a dataset directory into `out_dir`, optionally resuming from a checkpoint directory.
///
/// The checkpoint lands in `out_dir/checkpoint`, step metrics in `out_dir/metrics.jsonl`.
/// On a non-finite loss the last good state is checkpointed before the error is returned.
pub fn run_training(cfg: &TrainConfig, data_dir: &Path, out_dir: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    let samples = load_dataset(data_dir)?;
    let (cfg, mut state) = match resume {
        Some(dir) => {
            let (saved, state) = TrainState::load(dir)?;
            // the saved run defines everything except how long to keep going
            (TrainConfig { steps: cfg.steps, checkpoint_every: cfg.checkpoint_every, log_every: cfg.log_every, ..saved }, state)
        }
        None => (cfg.clone(), TrainState::new(cfg)?),
    };
    let trainer = Trainer::new(cfg.clone(), &samples)?;
    fs::create_dir_all(out_dir)?;
    let ckpt = out_dir.join("checkpoint");
    let metrics_path = out_dir.join("metrics.jsonl");
    if resume.is_some() {
        truncate_metrics(&metrics_path, state.step)?;
    } else if metrics_path.exists() {
        fs::remove_file(&metrics_path)?;
    }
    let mut metrics = BufWriter::new(OpenOptions::new().create(true).append(true).open(&metrics_path)?);
    let mut last = None;
    let mut good = state.clone();
    let result = trainer.run(&mut state, |st, rec| {
        serde_json::to_writer(&mut metrics, rec)?;
        metrics.write_all(b"\n")?;
        last = Some(rec.loss);
        if cfg.log_every > 0 && st.step % cfg.log_every == 0 {
            log::info!("step {} total {:.5} diffusion {:.5} pixel {:.5}", st.step, rec.loss.total, rec.loss.diffusion, rec.loss.pixel);
        }
        if st.step % cfg.checkpoint_every == 0 || st.step == cfg.steps {
            metrics.flush()?;
            st.save(&cfg, &ckpt)?;
        }
        good.clone_from(st);
        Ok(())
    });
    metrics.flush()?;
    if let Err(e) = result {
        if matches!(e, Error::NonFiniteLoss { .. }) {
            good.save(&cfg, &ckpt)?;
        }
        return Err(e);
    }
    if !ckpt.join("state.json").exists() {
        state.save(&cfg, &ckpt)?;
    }
    Ok(TrainSummary { steps: state.step, last, checkpoint: ckpt })
}

/// Load a trained model (with any adapter merged) from a checkpoint directory or a bare model file.
pub fn load_trained_model(path: &Path) -> Result<Model<f32>> {
    if path.is_dir() {
        let (_, state) = TrainState::load(path)?;
        let mut model = state.model;
        if let Some(a) = &state.adapter {
            a.merge(&mut model.params);
        }
        Ok(model)
    } else {
        Model::load(path)
    }
}
