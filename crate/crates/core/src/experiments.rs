//! Multi-run experiments: ablation plans, assertions over their results, and the
//! IoU-vs-timestep reproduction.
//!
//! A plan names a list of runs (a base config plus overrides each) that are trained
//! on every seed of the plan with identical data and step budget, then evaluated.
//! Each finished run leaves `status.json` in its directory; rerunning a plan skips
//! runs whose saved status matches their resolved config.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{load_dataset, read_manifest};
use crate::diffusion::{NoiseSchedule, TeacherStrategy, TimestepSampler};
use crate::error::{Error, Result};
use crate::eval::{
    autoencoder_health, evaluate, fig_timesteps, iou_vs_timestep, plot_curve, write_report, AeHealth, EvalConfig, EvalReport, IoUCurve,
};
use crate::loss::AttnAutoencoder;
use crate::model::params::write_atomic;
use crate::model::Model;
use crate::scene::SceneSample;
use crate::train::{run_training, TrainConfig, TrainState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRun {
    pub name: String,
    /// `dotted.key=value` overrides applied to the plan's base config.
    #[serde(default)]
    pub overrides: Vec<String>,
}

/// Directional check over per-seed results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Assertion {
    /// `variant` beats `over` on `metric` by the given margins on at least `min_seeds` seeds.
    Improves {
        variant: String,
        over: String,
        metric: String,
        #[serde(default)]
        min_absolute: f64,
        #[serde(default)]
        min_relative: f64,
        min_seeds: usize,
    },
    /// `metric` of `variant` lies in `[min, max]` on at least `min_seeds` seeds.
    Within {
        variant: String,
        metric: String,
        #[serde(default = "neg_inf")]
        min: f64,
        #[serde(default = "pos_inf")]
        max: f64,
        min_seeds: usize,
    },
}

fn neg_inf() -> f64 {
    f64::NEG_INFINITY
}

fn pos_inf() -> f64 {
    f64::INFINITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub name: String,
    /// Training dataset directory.
    pub data: PathBuf,
    /// Held-out dataset for evaluation; the training set when absent.
    #[serde(default)]
    pub eval_data: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    #[serde(default)]
    pub base: TrainConfig,
    pub runs: Vec<PlanRun>,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Run used for deltas in the table.
    #[serde(default = "default_reference")]
    pub reference: String,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
}

fn default_reference() -> String {
    "baseline".into()
}

impl ExperimentPlan {
    pub fn load(path: &Path) -> Result<Self> {
        let plan: Self = serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Config(e.to_string()))?;
        Ok(plan)
    }

    /// Resolved config of run `name` at `seed`.
    pub fn resolve(&self, run: &PlanRun, seed: u64) -> Result<TrainConfig> {
        let mut cfg = self.base.with_overrides(&run.overrides)?;
        cfg.seed = seed;
        Ok(cfg)
    }

    /// Every run must resolve and validate, names must be unique, and assertions must name known runs.
    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("a plan needs at least one run and one seed".into()));
        }
        let mut names = HashSet::new();
        for run in &self.runs {
            if run.name.is_empty() || run.name.contains(['/', '\\']) {
                return Err(Error::Config(format!("invalid run name `{}`", run.name)));
            }
            if !names.insert(run.name.as_str()) {
                return Err(Error::Config(format!("duplicate run name `{}`", run.name)));
            }
            for &seed in &self.seeds {
                self.resolve(run, seed).map_err(|e| Error::Config(format!("run `{}`: {e}", run.name)))?;
            }
        }
        if HashSet::<u64>::from_iter(self.seeds.iter().copied()).len() != self.seeds.len() {
            return Err(Error::Config("duplicate seeds".into()));
        }
        self.eval.validate()?;
        for a in &self.assertions {
            let (names_used, metric) = match a {
                Assertion::Improves { variant, over, metric, .. } => (vec![variant, over], metric),
                Assertion::Within { variant, metric, .. } => (vec![variant], metric),
            };
            if let Some(n) = names_used.iter().find(|n| !names.contains(n.as_str())) {
                return Err(Error::Config(format!("assertion names unknown run `{n}`")));
            }
            if !METRICS.contains(&metric.as_str()) {
                return Err(Error::Config(format!("unknown metric `{metric}` (known: {})", METRICS.join(", "))));
            }
        }
        Ok(())
    }
}

/// Metric names usable in assertions and tables.
pub const METRICS: [&str; 9] = [
    "color_binding",
    "two_object_color_binding",
    "two_object",
    "spatial",
    "iou_high_t",
    "spearman",
    "peak_in_lowest_quartile",
    "ae_recon_ratio",
    "ae_latent_distance",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub name: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub ok: bool,
    pub error: Option<String>,
    pub train_seconds: f64,
    pub report: Option<EvalReport>,
    pub ae_health: Option<AeHealth>,
}

impl RunStatus {
    pub fn metric(&self, name: &str) -> Option<f64> {
        let r = self.report.as_ref()?;
        match name {
            "color_binding" => Some(r.binding.color_binding),
            "two_object_color_binding" => Some(r.binding.two_object_color_binding),
            "two_object" => Some(r.binding.two_object),
            "spatial" => Some(r.binding.spatial),
            "iou_high_t" => r.iou_high_t,
            "spearman" => Some(r.spearman),
            "peak_in_lowest_quartile" => Some(if peak_in_lowest_quartile(&r.iou_curve) { 1.0 } else { 0.0 }),
            "ae_recon_ratio" => self.ae_health.map(|h| h.recon_ratio()),
            "ae_latent_distance" => self.ae_health.map(|h| h.latent_distance),
            _ => None,
        }
    }
}

/// Whether the curve peaks at a timestep within the lowest quarter of the evaluated range.
pub fn peak_in_lowest_quartile(curve: &IoUCurve) -> bool {
    let n = curve.timesteps.len();
    n > 0 && curve.argmax() < n.div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionOutcome {
    pub assertion: Assertion,
    pub passed_seeds: usize,
    pub evaluated_seeds: usize,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub plan: String,
    pub reference: String,
    pub runs: Vec<RunStatus>,
    pub assertions: Vec<AssertionOutcome>,
}

impl AblationTable {
    pub fn get(&self, name: &str, seed: u64) -> Option<&RunStatus> {
        self.runs.iter().find(|r| r.name == name && r.seed == seed)
    }

    /// Per-run mean over seeds of one metric.
    pub fn mean_metric(&self, name: &str, metric: &str) -> Option<f64> {
        let v: Vec<f64> = self.runs.iter().filter(|r| r.name == name).filter_map(|r| r.metric(metric)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn all_passed(&self) -> bool {
        self.runs.iter().all(|r| r.ok) && self.assertions.iter().all(|a| a.passed)
    }

    /// Plain-text table: seed-averaged metrics per run with deltas against the reference run.
    pub fn render(&self) -> String {
        let cols = ["two_object_color_binding", "color_binding", "spatial", "iou_high_t", "spearman"];
        let mut names: Vec<&str> = Vec::new();
        for r in &self.runs {
            if !names.contains(&r.name.as_str()) {
                names.push(&r.name);
            }
        }
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>6} {:>18} {:>18} {:>18} {:>18} {:>18}", "run", "ok", "2obj-color", "color", "spatial", "iou@t>=0.7T", "spearman");
        for name in names {
            let ok = self.runs.iter().filter(|r| r.name == name && r.ok).count();
            let total = self.runs.iter().filter(|r| r.name == name).count();
            let _ = write!(out, "{:<16} {:>6}", name, format!("{ok}/{total}"));
            for c in cols {
                let cell = match (self.mean_metric(name, c), self.mean_metric(&self.reference, c)) {
                    (Some(v), Some(b)) if name != self.reference => format!("{v:.3} ({:+.3})", v - b),
                    (Some(v), _) => format!("{v:.3}"),
                    (None, _) => "-".into(),
                };
                let _ = write!(out, " {cell:>18}");
            }
            out.push('\n');
        }
        for a in &self.assertions {
            let _ = writeln!(out, "{} {}", if a.passed { "PASS" } else { "FAIL" }, a.detail);
        }
        out
    }
}

pub fn check_assertion(a: &Assertion, table: &AblationTable, seeds: &[u64]) -> AssertionOutcome {
    let mut passed = 0;
    let mut evaluated = 0;
    let mut values = Vec::new();
    let (need, label) = match a {
        Assertion::Improves { variant, over, metric, min_absolute, min_relative, min_seeds } => {
            for &s in seeds {
                let (Some(v), Some(o)) =
                    (table.get(variant, s).and_then(|r| r.metric(metric)), table.get(over, s).and_then(|r| r.metric(metric)))
                else {
                    continue;
                };
                evaluated += 1;
                let rel_ok = if *min_relative > 0.0 { o > 0.0 && (v - o) / o >= *min_relative } else { true };
                if v - o >= *min_absolute && rel_ok {
                    passed += 1;
                }
                values.push(format!("{v:.4} vs {o:.4}"));
            }
            (*min_seeds, format!("{variant} improves on {over} in {metric} (abs >= {min_absolute}, rel >= {min_relative})"))
        }
        Assertion::Within { variant, metric, min, max, min_seeds } => {
            for &s in seeds {
                let Some(v) = table.get(variant, s).and_then(|r| r.metric(metric)) else { continue };
                evaluated += 1;
                if (*min..=*max).contains(&v) {
                    passed += 1;
                }
                values.push(format!("{v:.4}"));
            }
            (*min_seeds, format!("{variant} {metric} in [{min}, {max}]"))
        }
    };
    AssertionOutcome {
        assertion: a.clone(),
        passed_seeds: passed,
        evaluated_seeds: evaluated,
        passed: passed >= need,
        detail: format!("{label}: {passed}/{evaluated} seeds (need {need}) [{}]", values.join("; ")),
    }
}

/// Timestep at which the teacher map is read for autoencoder diagnostics.
fn teacher_probe_t(cfg: &TrainConfig) -> Result<usize> {
    Ok(match cfg.teacher_strategy() {
        TeacherStrategy::DensityMode => TimestepSampler::new(cfg.sampler, cfg.t_train)?.density_mode_below(cfg.t_train),
        _ => 0,
    })
}

/// Train, evaluate, and record one run in `dir`.
pub fn execute_run(
    name: &str,
    cfg: &TrainConfig,
    data: &Path,
    eval_samples: &[SceneSample],
    eval: &EvalConfig,
    dir: &Path,
) -> Result<RunStatus> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("config.json"), serde_json::to_string_pretty(cfg)?.as_bytes())?;
    let started = Instant::now();
    let summary = run_training(cfg, data, dir, None)?;
    let train_seconds = started.elapsed().as_secs_f64();
    let (_, state) = TrainState::load(&summary.checkpoint)?;
    let mut model = state.model.clone();
    if let Some(a) = &state.adapter {
        a.merge(&mut model.params);
    }
    let schedule = NoiseSchedule::new(cfg.schedule, cfg.t_train)?;
    let palette = read_manifest(data)?.palette;
    let report = evaluate(&model, &schedule, eval_samples, &palette, eval, &format!("{name}-seed{}", cfg.seed))?;
    write_report(&report, &dir.join("report.json"))?;
    let ae_health = if cfg.wiring().uses_autoencoder() {
        let initial = AttnAutoencoder::new(cfg.ctcal.autoencoder, cfg.model.attn_resolution, cfg.seed.wrapping_add(1))?;
        Some(autoencoder_health(&model, &schedule, &initial, &state.ae, eval_samples, teacher_probe_t(cfg)?, 64)?)
    } else {
        None
    };
    Ok(RunStatus { name: name.into(), seed: cfg.seed, config: cfg.clone(), ok: true, error: None, train_seconds, report: Some(report), ae_health })
}

/// Finished run in `dir` trained with `cfg` and evaluated with the plan's settings.
fn cached_status(plan: &ExperimentPlan, cfg: &TrainConfig, dir: &Path) -> Option<RunStatus> {
    let eval = serde_json::to_value(&plan.eval).ok()?;
    std::fs::read_to_string(dir.join("status.json"))
        .ok()
        .and_then(|s| serde_json::from_str::<RunStatus>(&s).ok())
        .filter(|s| s.ok && &s.config == cfg && s.report.as_ref().is_some_and(|r| r.config == eval))
}

/// The plan's table from finished runs only; `None` if any run is missing or stale.
pub fn cached_table(plan: &ExperimentPlan, root: &Path) -> Result<Option<AblationTable>> {
    plan.validate()?;
    let mut table = AblationTable { plan: plan.name.clone(), reference: plan.reference.clone(), runs: Vec::new(), assertions: Vec::new() };
    for &seed in &plan.seeds {
        for run in &plan.runs {
            let cfg = plan.resolve(run, seed)?;
            match cached_status(plan, &cfg, &root.join(format!("{}-seed{seed}", run.name))) {
                Some(s) => table.runs.push(s),
                None => return Ok(None),
            }
        }
    }
    table.assertions = plan.assertions.iter().map(|a| check_assertion(a, &table, &plan.seeds)).collect();
    Ok(Some(table))
}

/// Run a validated plan inside `root`, reusing finished runs whose config is unchanged.
pub fn ablate_in(plan: &ExperimentPlan, root: &Path) -> Result<AblationTable> {
    plan.validate()?;
    std::fs::create_dir_all(root)?;
    write_atomic(&root.join("plan.json"), serde_json::to_string_pretty(plan)?.as_bytes())?;
    let eval_dir = plan.eval_data.as_deref().unwrap_or(&plan.data);
    let eval_samples = load_dataset(eval_dir)?;
    let mut table = AblationTable { plan: plan.name.clone(), reference: plan.reference.clone(), runs: Vec::new(), assertions: Vec::new() };
    for &seed in &plan.seeds {
        for run in &plan.runs {
            let cfg = plan.resolve(run, seed)?;
            let dir = root.join(format!("{}-seed{seed}", run.name));
            let status_path = dir.join("status.json");
            let status = match cached_status(plan, &cfg, &dir) {
                Some(s) => {
                    log::info!("reusing finished run {}", dir.display());
                    s
                }
                None => {
                    log::info!("training {} (seed {seed}) into {}", run.name, dir.display());
                    let status = execute_run(&run.name, &cfg, &plan.data, &eval_samples, &plan.eval, &dir).unwrap_or_else(|e| RunStatus {
                        name: run.name.clone(),
                        seed,
                        config: cfg.clone(),
                        ok: false,
                        error: Some(e.to_string()),
                        train_seconds: 0.0,
                        report: None,
                        ae_health: None,
                    });
                    write_atomic(&status_path, serde_json::to_string_pretty(&status)?.as_bytes())?;
                    status
                }
            };
            table.runs.push(status);
            write_atomic(&root.join("table.json"), serde_json::to_string_pretty(&table)?.as_bytes())?;
        }
    }
    table.assertions = plan.assertions.iter().map(|a| check_assertion(a, &table, &plan.seeds)).collect();
    write_atomic(&root.join("table.json"), serde_json::to_string_pretty(&table)?.as_bytes())?;
    write_atomic(&root.join("table.txt"), table.render().as_bytes())?;
    Ok(table)
}

/// IoU-vs-timestep at `t/T` in `{0.05, ..., 0.95}` with its rank correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig2bResult {
    pub curve: IoUCurve,
    pub spearman: f64,
    /// `|rho| < 0.5`.
    pub no_trend: bool,
    pub peak_in_lowest_quartile: bool,
}

pub fn repro_fig2b(model: &Model<f32>, schedule: &NoiseSchedule, samples: &[SceneSample], seeds: &[u64], out: &Path) -> Result<Fig2bResult> {
    let curve = iou_vs_timestep(model, schedule, samples, &fig_timesteps(schedule.t_train()), seeds)?;
    let rho = curve.spearman();
    let result = Fig2bResult { spearman: rho, no_trend: rho.abs() < 0.5, peak_in_lowest_quartile: peak_in_lowest_quartile(&curve), curve };
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("curve.json"), serde_json::to_string_pretty(&result)?.as_bytes())?;
    let xs: Vec<f64> = result.curve.timesteps.iter().map(|&t| t as f64 / schedule.t_train() as f64).collect();
    let y_max = result.curve.mean.iter().copied().fold(0.0, f64::max).max(1e-3) * 1.1;
    plot_curve(&out.join("curve.png"), &xs, &result.curve.mean, y_max, &format!("IOU VS T/T  RHO={rho:.2}"))?;
    Ok(result)
}

/// Seed-averaged metric per run name, for quick summaries.
pub fn summarize(table: &AblationTable, metric: &str) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for r in &table.runs {
        if let Some(v) = table.mean_metric(&r.name, metric) {
            out.insert(r.name.clone(), v);
        }
    }
    out
}
