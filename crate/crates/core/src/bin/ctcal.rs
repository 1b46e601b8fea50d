//! Command-line entry point: dataset generation, training, evaluation,
//! ablation plans, attention inspection, and the IoU-vs-timestep reproduction.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use ctcal::dataset::{load_dataset, read_manifest, write_dataset};
use ctcal::diffusion::NoiseSchedule;
use ctcal::eval::render::write_image_png;
use ctcal::eval::sample::SamplerMethod;
use ctcal::eval::{attention_at, evaluate, generate, render_heatmaps, write_report, EvalConfig, SamplerConfig};
use ctcal::experiments::{ablate_in, repro_fig2b, ExperimentPlan};
use ctcal::model::params::write_atomic;
use ctcal::prompts::tokenize;
use ctcal::scene::{generate as generate_scenes, GenerationSpec, RelationPolicy, SubjectMode};
use ctcal::train::{load_trained_model, run_training, TrainConfig, TrainState};
use ctcal::{Error, Result};

#[derive(Parser)]
#[command(name = "ctcal", version, about = "Cross-timestep attention self-calibration experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene dataset.
    DatasetGen {
        /// Generation spec JSON; flags override its keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        resolution: Option<usize>,
        /// one, two or mixed.
        #[arg(long)]
        subjects: Option<String>,
        /// none, spatial or mixed.
        #[arg(long)]
        relations: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// baseline, ctcal, or ablation variant a..e.
        #[arg(long)]
        mode: Option<String>,
        /// fixed_zero, density_mode or uniform_below.
        #[arg(long)]
        teacher: Option<String>,
        /// Extra `dotted.key=value` overrides.
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint: IoU curve, binding oracle, diversity proxy.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated, strictly increasing.
        #[arg(long, value_delimiter = ',')]
        curve_timesteps: Option<Vec<usize>>,
        /// Number of noise seeds for the curve.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        prompts: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        guidance: Option<f64>,
        /// DDPM reverse update: `ancestral` or `ddim`.
        #[arg(long)]
        sampler: Option<SamplerMethod>,
    },
    /// Train and evaluate every run of a plan, then tabulate.
    Ablate {
        plan: PathBuf,
        /// Exit with status 4 when any plan assertion fails.
        #[arg(long)]
        assert: bool,
        /// Reuse this directory instead of a fresh run-stamped one.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Generate an image for a prompt and write per-token attention heatmaps at timestep `t`.
    InspectAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        t: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        guidance: Option<f64>,
        /// DDPM reverse update: `ancestral` or `ddim`.
        #[arg(long)]
        sampler: Option<SamplerMethod>,
    },
    /// IoU-vs-timestep curve at t/T in {0.05, ..., 0.95}, with Spearman rho and a plot.
    ReproFig2b {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        seeds: u64,
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
}

/// Fresh `root/<timestamp>` directory.
fn run_dir(root: &Path) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
    let mut dir = root.join(&stamp);
    let mut k = 1;
    while dir.exists() {
        dir = root.join(format!("{stamp}-{k}"));
        k += 1;
    }
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn echo<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    write_atomic(&dir.join(name), serde_json::to_string_pretty(value)?.as_bytes())
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn enum_flag<T: serde::de::DeserializeOwned>(what: &str, v: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(v.to_string())).map_err(|_| Error::Config(format!("invalid {what} `{v}`")))
}

fn schedule_of(cfg: &TrainConfig) -> Result<NoiseSchedule> {
    NoiseSchedule::new(cfg.schedule, cfg.t_train)
}

/// Model plus the training config that produced it (defaults for a bare model file).
fn load_for_eval(ckpt: &Path) -> Result<(ctcal::model::Model<f32>, TrainConfig)> {
    let model = load_trained_model(ckpt)?;
    let cfg = if ckpt.is_dir() { TrainState::load(ckpt)?.0 } else { TrainConfig { model: model.config().clone(), ..TrainConfig::default() } };
    Ok((model, cfg))
}

fn sampler_of(base: SamplerConfig, steps: Option<usize>, guidance: Option<f64>, method: Option<SamplerMethod>) -> SamplerConfig {
    SamplerConfig { steps: steps.unwrap_or(base.steps), guidance: guidance.unwrap_or(base.guidance), method: method.unwrap_or(base.method) }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::DatasetGen { config, seed, count, resolution, subjects, relations, out } => {
            let mut spec: GenerationSpec = match &config {
                Some(p) => parse_json(p)?,
                None => GenerationSpec::default(),
            };
            spec.seed = seed.unwrap_or(spec.seed);
            spec.count = count.unwrap_or(spec.count);
            spec.resolution = resolution.unwrap_or(spec.resolution);
            if let Some(s) = subjects {
                spec.subjects = enum_flag::<SubjectMode>("subjects", &s)?;
            }
            if let Some(r) = relations {
                spec.relations = enum_flag::<RelationPolicy>("relations", &r)?;
            }
            spec.palette.validate()?;
            let samples = generate_scenes(&spec)?;
            write_dataset(&samples, &spec.palette, &out)?;
            echo(&out, "generation.json", &spec)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::Train { config, data, out, resume, steps, seed, mode, teacher, set } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            let mut overrides = Vec::new();
            if let Some(s) = steps {
                overrides.push(format!("steps={s}"));
            }
            if let Some(s) = seed {
                overrides.push(format!("seed={s}"));
            }
            if let Some(m) = mode {
                cfg.mode = m.parse()?;
            }
            if let Some(t) = teacher {
                cfg.teacher = Some(t.parse()?);
            }
            overrides.extend(set);
            let cfg = cfg.with_overrides(&overrides)?;
            let dir = run_dir(&out)?;
            echo(&dir, "config.json", &cfg)?;
            let summary = run_training(&cfg, &data, &dir, resume.as_deref())?;
            println!("trained {} steps; checkpoint at {}", summary.steps, summary.checkpoint.display());
            if let Some(l) = summary.last {
                println!("last step: total {:.5} diffusion {:.5} pixel {:.5} semantic {:.5}", l.total, l.diffusion, l.pixel, l.semantic);
            }
        }
        Command::Eval { ckpt, data, out, config, curve_timesteps, seeds, prompts, steps, guidance, sampler } => {
            let mut ecfg: EvalConfig = match &config {
                Some(p) => parse_json(p)?,
                None => EvalConfig::default(),
            };
            if curve_timesteps.is_some() {
                ecfg.curve_timesteps = curve_timesteps;
            }
            if let Some(k) = seeds {
                ecfg.seeds = (0..k).collect();
            }
            ecfg.prompts = prompts.unwrap_or(ecfg.prompts);
            ecfg.sampler = sampler_of(ecfg.sampler, steps, guidance, sampler);
            ecfg.validate()?;
            let dir = run_dir(&out)?;
            echo(&dir, "eval_config.json", &ecfg)?;
            let (model, tcfg) = load_for_eval(&ckpt)?;
            let samples = load_dataset(&data)?;
            let palette = read_manifest(&data)?.palette;
            let schedule = schedule_of(&tcfg)?;
            let run_id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let report = evaluate(&model, &schedule, &samples, &palette, &ecfg, &run_id)?;
            write_report(&report, &dir.join("report.json"))?;
            let xs: Vec<f64> = report.iou_curve.timesteps.iter().map(|&t| t as f64 / tcfg.t_train as f64).collect();
            let y_max = report.iou_curve.mean.iter().copied().fold(0.0, f64::max).max(1e-3) * 1.1;
            ctcal::eval::plot_curve(&dir.join("curve.png"), &xs, &report.iou_curve.mean, y_max, &format!("IOU  RHO={:.2}", report.spearman))?;
            let b = &report.binding;
            println!("color binding {:.3} (two-object prompts {:.3}), two-object {:.3}, spatial {:.3}", b.color_binding, b.two_object_color_binding, b.two_object, b.spatial);
            println!("spearman rho {:.3}; iou at t>=0.7T {:?}; diversity proxy {:?}", report.spearman, report.iou_high_t, report.diversity_proxy);
            println!("report at {}", dir.join("report.json").display());
        }
        Command::Ablate { plan, assert, dir } => {
            let plan = ExperimentPlan::load(&plan)?;
            plan.validate()?;
            let root = match dir {
                Some(d) => d,
                None => run_dir(&plan.output.join(&plan.name))?,
            };
            let table = ablate_in(&plan, &root)?;
            print!("{}", table.render());
            println!("results in {}", root.display());
            if assert && !table.all_passed() {
                return Ok(4);
            }
        }
        Command::InspectAttn { ckpt, prompt, t, out, seed, steps, guidance, sampler } => {
            let (model, tcfg) = load_for_eval(&ckpt)?;
            let schedule = schedule_of(&tcfg)?;
            if t > schedule.t_train() {
                return Err(Error::InvalidTimestep { t, lo: 0, hi: schedule.t_train() });
            }
            let tokens = tokenize(&prompt)?;
            let ids: Vec<usize> = tokens.iter().map(|tk| tk.vocab_id).collect();
            let sampler = sampler_of(SamplerConfig::default(), steps, guidance, sampler);
            let dir = run_dir(&out)?;
            echo(&dir, "inspect.json", &serde_json::json!({ "ckpt": ckpt, "prompt": prompt, "t": t, "seed": seed, "sampler": sampler }))?;
            let image = generate(&model, &schedule, &ids, seed, sampler)?;
            let r = model.config().resolution;
            write_image_png(&dir.join("image.png"), &image, r, 8)?;
            let map = attention_at(&model, &schedule, &image, &ids, t, seed)?;
            let surfaces: Vec<String> = tokens.iter().map(|tk| tk.surface.clone()).collect();
            let paths = render_heatmaps(map.values.data(), (map.height(), map.width()), &surfaces, &dir.join("heatmaps"), 16)?;
            println!("wrote image and {} heatmaps to {}", paths.len(), dir.display());
        }
        Command::ReproFig2b { ckpt, data, out, seeds, samples } => {
            let (model, tcfg) = load_for_eval(&ckpt)?;
            let schedule = schedule_of(&tcfg)?;
            let all = load_dataset(&data)?;
            let dir = run_dir(&out)?;
            echo(&dir, "fig2b_config.json", &serde_json::json!({ "ckpt": ckpt, "data": data, "seeds": seeds, "samples": samples }))?;
            let seed_list: Vec<u64> = (0..seeds).collect();
            let res = repro_fig2b(&model, &schedule, &all[..samples.clamp(1, all.len())], &seed_list, &dir)?;
            println!(
                "spearman rho {:.3}{}; peak at t={} ({})",
                res.spearman,
                if res.no_trend { " (no trend)" } else { "" },
                res.curve.timesteps[res.curve.argmax()],
                if res.peak_in_lowest_quartile { "lowest quartile" } else { "not in lowest quartile" }
            );
            println!("curve at {}", dir.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
