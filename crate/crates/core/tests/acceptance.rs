//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-4, 9 and 10 are exact properties; they always run and a failure fails the target.
//! Criteria 5-8 are desk-scale experiments read from a cached ablation plan. They are reported
//! but never fail the target. Set `CTCAL_ACCEPTANCE=full` to train missing runs first (about
//! five hours on one core); `CTCAL_ACCEPTANCE_DIR` relocates the cache.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ctcal::dataset::{load_dataset, read_manifest, write_dataset};
use ctcal::diffusion::{NoiseSchedule, TimestepPair};
use ctcal::eval::oracle::{binding_oracle, BindingAccuracy};
use ctcal::eval::sample::SamplerMethod;
use ctcal::eval::{evaluate, read_report, write_report, EvalConfig, SamplerConfig};
use ctcal::experiments::{ablate_in, cached_table, check_assertion, AblationTable, Assertion, ExperimentPlan, PlanRun};
use ctcal::loss::{
    pixel_loss, recon_proxy_loss, semantic_loss, subject_regularizer, timestep_weight, AeBinding, AttnAutoencoder, AutoencoderArch,
    AutoencoderConfig, CtcalTerms, CtcalWeights,
};
use ctcal::model::{extract_image_text_block, Branch, Model, ModelConfig, ParamStore, Variant};
use ctcal::scene::{generate, sample_scene, GenerationSpec, Palette, RelationMode, SubjectMode};
use ctcal::train::{compute_step, CtcalConfig, Mode, StepContext, StepItem, TeacherSource, TrainConfig, TrainState, Trainer};
use ctcal_autodiff::check::{central_difference, relative_error};
use ctcal_autodiff::{Graph, Tensor, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

/// Number, name and check of an exact criterion.
type Criterion = (usize, &'static str, fn() -> Outcome);

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    // libtest passes flags such as `--nocapture`; this target takes none
    let started = Instant::now();
    let exact: [Criterion; 6] = [
        (1, "gradient oracle suite", gradient_oracles),
        (2, "teacher detachment equivalence", teacher_detachment),
        (3, "closed-form loss cases", closed_forms),
        (4, "attention invariants", attention_invariants),
        (9, "determinism", determinism),
        (10, "round trips and oracle exactness", round_trips),
    ];
    let mut lines: Vec<(usize, String, Outcome, bool)> = Vec::new();
    for (id, name, f) in exact {
        let t = Instant::now();
        let mut o = std::panic::catch_unwind(f).unwrap_or_else(|_| outcome(false, "panicked"));
        o.detail = format!("{} ({:.1} s)", o.detail, t.elapsed().as_secs_f64());
        lines.push((id, name.into(), o, true));
    }
    for (id, name, o) in experiments() {
        lines.push((id, name, o, false));
    }
    lines.sort_by_key(|l| l.0);
    println!();
    for (id, name, o, asserted) in &lines {
        let tag = if *asserted { "" } else { " [experimental, not asserted]" };
        println!("{} {id:>2}. {name}{tag}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let passed = lines.iter().filter(|l| l.2.pass).count();
    let exact_failed = lines.iter().filter(|l| l.3 && !l.2.pass).count();
    println!("\nacceptance: {passed}/{} criteria passed in {:.0} s", lines.len(), started.elapsed().as_secs_f64());
    if exact_failed > 0 {
        println!("{exact_failed} exact criteria failed");
        std::process::exit(1);
    }
}

// ---------- 1. finite differences ----------

const H: usize = 4;
const N: usize = 5;
const NOUNS: [usize; 2] = [1, 4];
const FD_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
enum Term {
    Pixel,
    Semantic,
    Recon,
    Reg,
    Composed,
}

fn unit_maps(seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[H, H, N], |_| rng.random_range(0.0..1.0))
}

fn term_var(g: &mut Graph<f64>, which: Term, ae: &AttnAutoencoder<f64>, bind: &AeBinding, s: Var, t: Var) -> Var {
    let tau = 0.05;
    let terms = CtcalTerms {
        pixel: matches!(which, Term::Pixel | Term::Composed).then(|| pixel_loss(g, s, t, &NOUNS).unwrap()),
        semantic: matches!(which, Term::Semantic | Term::Composed).then(|| semantic_loss(g, ae, bind, s, t, &NOUNS, true).unwrap()),
        reconstruction: matches!(which, Term::Recon | Term::Composed).then(|| recon_proxy_loss(g, ae, bind, t, &NOUNS).unwrap()),
        subject_reg: matches!(which, Term::Reg | Term::Composed).then(|| subject_regularizer(g, s, &NOUNS, tau).unwrap()),
    };
    let w = CtcalWeights { lambda1: 0.7, lambda2: 1.3, lambda3: 0.4, lambda4: 2.0, tau };
    let c = terms.weighted_sum(g, &w).unwrap();
    // the composition with a diffusion constant and a timestep weight
    let c = g.scale(c, timestep_weight(600, 1000));
    g.add_scalar(c, 0.25)
}

/// Term value with the teacher-side encoder read from `frozen`, which the objective treats as constant.
fn term_value(which: Term, live: &AttnAutoencoder<f64>, frozen: &AttnAutoencoder<f64>, s: &Tensor<f64>, t: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let bind = AeBinding { live: live.params.bind(&mut g, false), frozen: frozen.params.bind(&mut g, false) };
    let (s, t) = (g.constant(s.clone()), g.constant(t.clone()));
    let v = term_var(&mut g, which, live, &bind, s, t);
    g.value(v).item()
}

fn loss_level_errors(seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for which in [Term::Pixel, Term::Semantic, Term::Recon, Term::Reg, Term::Composed] {
        let ae = AttnAutoencoder::<f64>::new(AutoencoderConfig { arch: AutoencoderArch::Conv, latent: 3 }, H, seed).unwrap();
        let (s0, t0) = (unit_maps(2 * seed + 100), unit_maps(2 * seed + 101));
        let mut g = Graph::new();
        let bind = AeBinding::new(&mut g, &ae, true);
        let s = g.leaf(s0.clone());
        let t = g.constant(t0.clone());
        let loss = term_var(&mut g, which, &ae, &bind, s, t);
        let grads = g.backward(loss);

        let ds = grads.get(s).map(|t| t.to_f64_vec()).unwrap_or_else(|| vec![0.0; s0.len()]);
        let numeric =
            central_difference(|v| term_value(which, &ae, &ae, &Tensor::from_f64(s0.shape(), v).unwrap(), &t0), &s0.to_f64_vec(), 1e-6);
        worst = worst.max(relative_error(&ds, &numeric));

        let mut analytic = Vec::new();
        let mut point = Vec::new();
        let mut coords = Vec::new();
        for (id, _, p) in ae.params.iter() {
            let grad = grads.get(bind.live.get(id)).map(|t| t.to_f64_vec()).unwrap_or_else(|| vec![0.0; p.len()]);
            for (k, &d) in grad.iter().enumerate().take(3) {
                coords.push((id, k));
                analytic.push(d);
                point.push(p.data()[k]);
            }
        }
        let numeric = central_difference(
            |v| {
                let mut b = ae.clone();
                for (&(id, k), &x) in coords.iter().zip(v) {
                    b.params.get_mut(id).data_mut()[k] = x;
                }
                term_value(which, &b, &ae, &s0, &t0)
            },
            &point,
            1e-6,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

fn micro_items(seed: u64, r: usize, t_train: usize) -> Vec<StepItem<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2)
        .map(|i| {
            let p = sample_scene(seed * 7 + i, 1 + i as usize, RelationMode::None).unwrap();
            let t_stu = rng.random_range(1..t_train);
            StepItem {
                x0: (0..3 * r * r).map(|_| rng.random_range(-1.0..1.0)).collect(),
                eps: (0..3 * r * r).map(|_| rng.sample(StandardNormal)).collect(),
                tokens: p.token_ids(),
                align: p.subject_noun_positions().unwrap(),
                pair: TimestepPair::new(t_stu, rng.random_range(0..t_stu), t_train).unwrap(),
            }
        })
        .collect()
}

/// Full training objective through the micro model; teacher maps are held constant as the objective detaches them.
fn model_level_error(variant: Variant, seed: u64) -> f64 {
    let model = Model::<f64>::new(ModelConfig::micro(variant), seed).unwrap();
    let ae = AttnAutoencoder::<f64>::new(AutoencoderConfig::default(), model.config().attn_resolution, seed + 1).unwrap();
    let schedule = NoiseSchedule::ddpm(1000);
    let ctcal = CtcalConfig::default();
    let wiring = ctcal::train::mode_wiring(Mode::Ctcal);
    let items = micro_items(seed, model.config().resolution, 1000);
    let ctx = StepContext { model: &model, ae: &ae, adapter: None, schedule: &schedule, wiring, ctcal: &ctcal };
    let out = compute_step(&ctx, &items, &TeacherSource::Live, false).unwrap();
    let teacher = TeacherSource::Constant(out.teacher_maps.clone());

    let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
    let mut coords = Vec::new();
    let mut analytic = Vec::new();
    for (i, (id, _, t)) in model.params.iter().enumerate() {
        let grad = out.model_grads[i].as_ref().map(|g| g.to_f64_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
        let first = rng.random_range(0..t.len());
        for k in [first, (first + 1) % t.len()] {
            if !coords.contains(&(id, k)) {
                coords.push((id, k));
                analytic.push(grad[k]);
            }
        }
    }
    let point: Vec<f64> = coords.iter().map(|&(id, k)| model.params.get(id).data()[k]).collect();
    let numeric = central_difference(
        |v| {
            let mut m = model.clone();
            for (&(id, k), &x) in coords.iter().zip(v) {
                m.params.get_mut(id).data_mut()[k] = x;
            }
            let ctx = StepContext { model: &m, ae: &ae, adapter: None, schedule: &schedule, wiring, ctcal: &ctcal };
            compute_step(&ctx, &items, &teacher, false).unwrap().mean.total
        },
        &point,
        1e-6,
    );
    relative_error(&analytic, &numeric)
}

fn gradient_oracles() -> Outcome {
    let t = Instant::now();
    let seeds = 0..5u64;
    let loss_err = seeds.clone().map(loss_level_errors).fold(0.0, f64::max);
    let mut model_err: f64 = 0.0;
    for variant in [Variant::CrossAttnUnet, Variant::MmDit] {
        for seed in seeds.clone() {
            model_err = model_err.max(model_level_error(variant, seed));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        loss_err <= FD_TOL && model_err <= FD_TOL && secs < 120.0,
        format!("max rel err {loss_err:.1e} (terms, composition; A_stu and autoencoder) and {model_err:.1e} (model params, both variants), 5 seeds, tol {FD_TOL:.0e}, limit 120 s"),
    )
}

// ---------- 2. teacher detachment ----------

fn small(mode: Mode) -> TrainConfig {
    TrainConfig {
        model: ModelConfig { d_model: 8, depth: 2, text_layers: 0, ..ModelConfig::default() },
        mode,
        batch_size: 2,
        steps: 10,
        log_every: 0,
        ..TrainConfig::default()
    }
}

fn to_f64(items: &[StepItem<f32>]) -> Vec<StepItem<f64>> {
    items
        .iter()
        .map(|it| StepItem {
            x0: it.x0.iter().map(|&v| v as f64).collect(),
            eps: it.eps.iter().map(|&v| v as f64).collect(),
            tokens: it.tokens.clone(),
            align: it.align.clone(),
            pair: it.pair,
        })
        .collect()
}

fn teacher_detachment() -> Outcome {
    let samples = generate(&GenerationSpec { seed: 1, count: 48, subjects: SubjectMode::Mixed, ..Default::default() }).unwrap();
    let cfg = small(Mode::Ctcal);
    let trainer = Trainer::new(cfg.clone(), &samples).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    let schedule = NoiseSchedule::ddpm(cfg.t_train);
    let mut worst: f64 = 0.0;
    let mut hashes_equal = true;
    for _ in 0..10 {
        let mut probe_rng = state.rng.clone();
        let items = to_f64(&trainer.draw_batch(&mut probe_rng));
        let (model, ae) = (state.model.cast::<f64>(), state.ae.cast::<f64>());
        let ctx = StepContext { model: &model, ae: &ae, adapter: None, schedule: &schedule, wiring: cfg.wiring(), ctcal: &cfg.ctcal };
        let live = compute_step(&ctx, &items, &TeacherSource::Live, true).unwrap();
        let constant = compute_step(&ctx, &items, &TeacherSource::Constant(live.teacher_maps.clone()), false).unwrap();
        let (stu, tea) = live.param_hashes.unwrap();
        hashes_equal &= stu == tea;
        for (a, b) in live.model_grads.iter().chain(&live.ae_grads).zip(constant.model_grads.iter().chain(&constant.ae_grads)) {
            worst = worst.max(match (a, b) {
                (Some(a), Some(b)) => a.max_abs_diff(b),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            });
        }
        trainer.step(&mut state).unwrap();
    }
    outcome(worst <= 1e-12 && hashes_equal, format!("10 training steps at f64: max grad diff {worst:.1e} (tol 1e-12), shared parameters {hashes_equal}"))
}

// ---------- 3. closed forms ----------

fn closed_forms() -> Outcome {
    let mut g = Graph::<f64>::new();
    // one column per subject; the maxima are 0.9, 0.5 and 0.7
    let a = g.constant(Tensor::new(&[1, 2, 3], vec![0.9, 0.1, 0.7, 0.2, 0.5, 0.0]).unwrap());
    let reg = subject_regularizer(&mut g, a, &[0, 1, 2], 0.1).unwrap();
    let reg = g.value(reg).item();
    // (0 + 0.3 + 0.1) / 3
    let reg_ok = (reg - 0.4 / 3.0).abs() <= 1e-9;
    let lambda = timestep_weight(250, 1000);
    let z = g.constant(Tensor::zeros(&[2, 2, 3]));
    let o = g.constant(Tensor::from_fn(&[2, 2, 3], |_| 1.0));
    let (zero, one) = (pixel_loss(&mut g, z, z, &[0, 2]).unwrap(), pixel_loss(&mut g, z, o, &[0, 2]).unwrap());
    let (zero, one) = (g.value(zero).item(), g.value(one).item());
    let pass = reg_ok && lambda == 0.25 && zero == 0.0 && one == 1.0;
    outcome(pass, format!("regularizer {reg:.12} (want 0.133333333333), lambda_t(250, 1000) = {lambda}, pixel zero case {zero}, one case {one}"))
}

// ---------- 4. attention invariants ----------

fn attention_invariants() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut forwards = 0;
    let mut reassembled = true;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for variant in [Variant::CrossAttnUnet, Variant::MmDit] {
        let cfg = ModelConfig { depth: 2, ..ModelConfig::micro(variant) };
        let model = Model::<f32>::new(cfg.clone(), 4).unwrap();
        let r = cfg.resolution;
        for _ in 0..500 {
            let b = rng.random_range(1..=3usize);
            let tokens: Vec<Vec<usize>> = (0..b)
                .map(|_| {
                    let mode = if rng.random_bool(0.5) { RelationMode::Spatial } else { RelationMode::None };
                    let n = if mode == RelationMode::Spatial { 2 } else { rng.random_range(1..=2) };
                    sample_scene(rng.next_u64(), n, mode).unwrap().token_ids()
                })
                .collect();
            let t: Vec<usize> = (0..b).map(|_| rng.random_range(0..1000)).collect();
            let mut g = Graph::<f32>::new();
            let p = model.params.bind(&mut g, false);
            let x = g.constant(Tensor::from_fn(&[b, 3, r, r], |_| rng.sample::<f32, _>(StandardNormal)));
            let out = model.forward(&mut g, &p, x, &tokens, &t, Branch::Student).unwrap();
            forwards += 1;
            for rec in &out.records {
                let w = g.value(rec.weights);
                let keys = *w.shape().last().unwrap();
                for row in w.data().chunks(keys) {
                    worst = worst.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
                }
                if let ctcal::model::AttnKind::Joint { n_img } = rec.kind {
                    reassembled &= reassembles(w, rec.heads, n_img, keys - n_img);
                }
            }
        }
    }
    outcome(
        worst <= 1e-5 && forwards == 1000 && reassembled,
        format!("{forwards} forwards at f32, max |row sum - 1| {worst:.1e} (tol 1e-5), joint block reassembly exact {reassembled}"),
    )
}

/// Write each item's image-to-text block back into its joint matrix and compare bit for bit.
fn reassembles(w: &Tensor<f32>, heads: usize, n_img: usize, n_txt: usize) -> bool {
    let total = n_img + n_txt;
    let per_item = heads * total * total;
    w.data().chunks(per_item).all(|item| {
        let full = Tensor::new(&[heads, total, total], item.to_vec()).unwrap();
        let block = extract_image_text_block(&full, n_img, n_txt).unwrap();
        let mut rebuilt = item.to_vec();
        for h in 0..heads {
            for r in 0..n_img {
                for c in 0..n_txt {
                    rebuilt[(h * total + r) * total + n_img + c] = block.data()[(h * n_img + r) * n_txt + c];
                }
            }
        }
        rebuilt.iter().zip(item).all(|(a, b)| a.to_bits() == b.to_bits())
    })
}

// ---------- 9. determinism ----------

fn determinism() -> Outcome {
    let spec = GenerationSpec { seed: 9, count: 256, ..Default::default() };
    let samples = generate(&spec).unwrap();
    let cfg = TrainConfig { mode: Mode::Ctcal, steps: 10, log_every: 0, ..TrainConfig::default() };
    let trainer = Trainer::new(cfg.clone(), &samples).unwrap();
    let logs: Vec<Vec<String>> = (0..2)
        .map(|_| {
            let mut state = TrainState::new(&cfg).unwrap();
            let mut log = Vec::new();
            trainer
                .run(&mut state, |_, r| {
                    let l = &r.loss;
                    let bits = [l.diffusion, l.pixel, l.semantic, l.reconstruction, l.subject_reg, l.lambda_t, l.total].map(f64::to_bits);
                    log.push(format!("{bits:?}"));
                    Ok(())
                })
                .unwrap();
            log
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let bytes: Vec<Vec<(String, Vec<u8>)>> = ["a", "b"]
        .iter()
        .map(|d| {
            let path = dir.path().join(d);
            write_dataset(&generate(&spec).unwrap(), &spec.palette, &path).unwrap();
            dir_bytes(&path)
        })
        .collect();
    let same_losses = logs[0].len() == 10 && logs[0] == logs[1];
    let same_data = !bytes[0].is_empty() && bytes[0] == bytes[1];
    outcome(same_losses && same_data, format!("loss breakdowns of 10 steps bitwise equal {same_losses}, dataset bytes equal {same_data} ({} files)", bytes[0].len()))
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

// ---------- 10. round trips ----------

fn same_store(a: &ParamStore<f32>, b: &ParamStore<f32>) -> bool {
    a.same_layout(b) && a.iter().zip(b.iter()).all(|((_, _, x), (_, _, y))| x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()))
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = GenerationSpec { seed: 10, count: 64, ..Default::default() };
    let samples = generate(&spec).unwrap();

    let cfg = TrainConfig { steps: 5, ..small(Mode::Ctcal) };
    let trainer = Trainer::new(cfg.clone(), &samples).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    trainer.run(&mut state, |_, _| Ok(())).unwrap();
    state.save(&cfg, &dir.path().join("ckpt")).unwrap();
    let (cfg2, mut loaded) = TrainState::load(&dir.path().join("ckpt")).unwrap();
    let ckpt = cfg2 == cfg
        && loaded.step == state.step
        && same_store(&loaded.model.params, &state.model.params)
        && same_store(&loaded.ae.params, &state.ae.params)
        && loaded.opt_model == state.opt_model
        && loaded.opt_ae == state.opt_ae
        && loaded.rng.next_u64() == state.clone().rng.next_u64();

    write_dataset(&samples, &spec.palette, &dir.path().join("data")).unwrap();
    let data = load_dataset(&dir.path().join("data")).unwrap() == samples;

    let eval = EvalConfig {
        sampler: SamplerConfig { steps: 4, guidance: 3.0, method: SamplerMethod::Ddim },
        prompts: 8,
        curve_timesteps: Some(vec![100, 500, 900]),
        curve_samples: 4,
        seeds: vec![0],
        diversity_prompts: 1,
        diversity_images: 3,
        seed: 0,
    };
    let report = evaluate(&state.model, &NoiseSchedule::ddpm(cfg.t_train), &samples, &spec.palette, &eval, "acceptance").unwrap();
    write_report(&report, &dir.path().join("report.json")).unwrap();
    let rep = read_report(&dir.path().join("report.json")).unwrap() == report;

    let palette = Palette::default();
    let truth = generate(&GenerationSpec { seed: 21, count: 500, subjects: SubjectMode::Mixed, ..Default::default() }).unwrap();
    let verdicts: Vec<_> = truth.iter().map(|s| binding_oracle(&s.image, s.resolution, &s.prompt, &palette)).collect();
    let acc = BindingAccuracy::from_verdicts(&verdicts);
    let oracle = (acc.color_binding, acc.two_object, acc.spatial) == (1.0, 1.0, 1.0);
    outcome(
        ckpt && data && rep && oracle,
        format!(
            "checkpoint {ckpt}, dataset {data}, report {rep}; oracle on 500 rendered scenes: color {:.3}, two-object {:.3} (n {}), spatial {:.3} (n {})",
            acc.color_binding, acc.two_object, acc.n_two_object, acc.spatial, acc.n_spatial
        ),
    )
}

// ---------- 5-8. desk-scale experiments ----------

fn cache_root() -> PathBuf {
    std::env::var_os("CTCAL_ACCEPTANCE_DIR").map(PathBuf::from).unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

fn plan(root: &Path) -> ExperimentPlan {
    let run = |name: &str, overrides: &[&str]| PlanRun { name: name.into(), overrides: overrides.iter().map(|s| s.to_string()).collect() };
    let improves = |variant: &str, over: &str, metric: &str, min_absolute: f64, min_relative: f64| Assertion::Improves {
        variant: variant.into(),
        over: over.into(),
        metric: metric.into(),
        min_absolute,
        min_relative,
        min_seeds: 2,
    };
    let within = |variant: &str, metric: &str, min: f64, max: f64, min_seeds: usize| Assertion::Within {
        variant: variant.into(),
        metric: metric.into(),
        min,
        max,
        min_seeds,
    };
    ExperimentPlan {
        name: "acceptance".into(),
        data: root.join("train"),
        eval_data: Some(root.join("eval")),
        seeds: vec![0, 1, 2],
        output: root.join("runs"),
        base: TrainConfig { steps: 10_000, checkpoint_every: 2_000, ..TrainConfig::default() },
        runs: vec![
            run("baseline", &["mode=baseline"]),
            run("e", &["mode=e"]),
            run("a", &["mode=a"]),
            run("b", &["mode=b"]),
            run("e_uniform_below", &["mode=e", "teacher=uniform_below"]),
        ],
        eval: EvalConfig { sampler: SamplerConfig { steps: 20, guidance: 3.0, method: SamplerMethod::Ddim }, ..EvalConfig::default() },
        reference: "baseline".into(),
        assertions: vec![
            within("baseline", "spearman", f64::NEG_INFINITY, -0.6, 2),
            within("baseline", "peak_in_lowest_quartile", 1.0, 1.0, 2),
            improves("e", "baseline", "iou_high_t", 0.0, 0.10),
            improves("e", "baseline", "two_object_color_binding", 0.05, 0.0),
            improves("b", "a", "color_binding", 0.0, 0.0),
            improves("e", "e_uniform_below", "color_binding", 0.0, 0.0),
        ],
    }
}

fn train_datasets(root: &Path) {
    for (dir, spec) in [("train", GenerationSpec { seed: 100, count: 2_000, ..Default::default() }), ("eval", GenerationSpec { seed: 999, count: 200, ..Default::default() })] {
        if read_manifest(&root.join(dir)).is_err() {
            write_dataset(&generate(&spec).unwrap(), &spec.palette, &root.join(dir)).unwrap();
        }
    }
}

fn experiments() -> Vec<(usize, String, Outcome)> {
    let names = [
        (5, "baseline IoU falls with t"),
        (6, "calibration improves late-step alignment and binding"),
        (7, "fixed-zero teacher at least matches uniform-below"),
        (8, "autoencoder health"),
    ];
    let root = cache_root();
    let plan = plan(&root);
    let full = std::env::var("CTCAL_ACCEPTANCE").is_ok_and(|v| v == "full");
    let table = if full {
        train_datasets(&root);
        ablate_in(&plan, &plan.output).map(Some)
    } else {
        cached_table(&plan, &plan.output)
    };
    let table = match table {
        Ok(Some(t)) => t,
        Ok(None) => {
            let msg = format!("not run; no finished plan in {} (set CTCAL_ACCEPTANCE=full to train it, about 5 h on one core)", plan.output.display());
            return names.iter().map(|&(i, n)| (i, n.to_string(), outcome(false, msg.clone()))).collect();
        }
        Err(e) => return names.iter().map(|&(i, n)| (i, n.to_string(), outcome(false, format!("plan failed: {e}")))).collect(),
    };
    println!("{}", table.render());
    let check = |k: usize| check_assertion(&plan.assertions[k], &table, &plan.seeds);
    let join = |ks: &[usize]| {
        let outs: Vec<_> = ks.iter().map(|&k| check(k)).collect();
        (outs.iter().all(|o| o.passed), outs.iter().map(|o| o.detail.clone()).collect::<Vec<_>>().join("; "))
    };

    let baseline_secs: Vec<f64> = plan.seeds.iter().filter_map(|&s| table.get("baseline", s)).map(|r| r.train_seconds).collect();
    let budget = baseline_secs.iter().all(|&s| s <= 1800.0);
    let (c5, d5) = join(&[0, 1]);
    let (c6, d6) = join(&[2, 3, 4]);
    let (c7, d7) = join(&[5]);
    let (c8, d8) = ae_health(&table);
    vec![
        (5, names[0].1.into(), outcome(c5 && budget, format!("{d5}; baseline training {} s (limit 1800)", fmt_list(&baseline_secs)))),
        (6, names[1].1.into(), outcome(c6, d6)),
        (7, names[2].1.into(), outcome(c7, d7)),
        (8, names[3].1.into(), outcome(c8, d8)),
    ]
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.0}")).collect::<Vec<_>>().join("/")
}

/// Every run that trained an autoencoder for at least 5k steps must reconstruct better and not collapse.
fn ae_health(table: &AblationTable) -> (bool, String) {
    let runs: Vec<_> = table.runs.iter().filter(|r| r.config.steps >= 5_000 && r.ae_health.is_some()).collect();
    let ok = |r: &&ctcal::experiments::RunStatus| {
        let h = r.ae_health.unwrap();
        h.recon_ratio() < 0.5 && h.latent_distance >= 1e-3
    };
    let worst_ratio = runs.iter().map(|r| r.ae_health.unwrap().recon_ratio()).fold(f64::NAN, f64::max);
    let min_dist = runs.iter().map(|r| r.ae_health.unwrap().latent_distance).fold(f64::NAN, f64::min);
    (
        !runs.is_empty() && runs.iter().all(ok),
        format!("{} runs; worst recon ratio {worst_ratio:.3} (need < 0.5), smallest latent distance {min_dist:.2e} (need >= 1e-3)", runs.len()),
    )
}
