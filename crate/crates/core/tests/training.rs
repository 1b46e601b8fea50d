//! Training loop: determinism, resumption, teacher detachment, adapters, and logging.

use ctcal::diffusion::NoiseSchedule;
use ctcal::model::lora::{attention_targets, AdapterConfig};
use ctcal::model::{LoraAdapter, ModelConfig, ParamStore};
use ctcal::scene::{generate, GenerationSpec, SceneSample, SubjectMode};
use ctcal::train::{compute_step, run_training, AdamConfig, AdamState, Mode, StepContext, StepItem, TeacherSource, TrainConfig, TrainState, Trainer};
use ctcal::Error;
use ctcal_autodiff::Tensor;

fn data() -> Vec<SceneSample> {
    generate(&GenerationSpec { seed: 1, count: 48, subjects: SubjectMode::Mixed, ..Default::default() }).unwrap()
}

fn small(mode: Mode) -> TrainConfig {
    TrainConfig {
        model: ModelConfig { d_model: 8, depth: 2, text_layers: 0, ..ModelConfig::default() },
        mode,
        batch_size: 2,
        steps: 10,
        checkpoint_every: 50,
        log_every: 0,
        ..TrainConfig::default()
    }
}

fn same_params(a: &ParamStore<f32>, b: &ParamStore<f32>) -> bool {
    a.same_layout(b) && a.iter().zip(b.iter()).all(|((_, _, x), (_, _, y))| x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()))
}

#[test]
fn identical_seeds_give_identical_runs() {
    let samples = data();
    let cfg = small(Mode::Ctcal);
    let trainer = Trainer::new(cfg.clone(), &samples).unwrap();
    let mut logs = Vec::new();
    let mut finals = Vec::new();
    for _ in 0..2 {
        let mut state = TrainState::new(&cfg).unwrap();
        let mut log = Vec::new();
        trainer
            .run(&mut state, |_, r| {
                log.push(serde_json::to_string(r)?);
                Ok(())
            })
            .unwrap();
        logs.push(log);
        finals.push(state);
    }
    assert_eq!(logs[0], logs[1]);
    assert!(same_params(&finals[0].model.params, &finals[1].model.params));
    assert!(same_params(&finals[0].ae.params, &finals[1].ae.params));
    let other = TrainState::new(&TrainConfig { seed: 1, ..cfg }).unwrap();
    assert!(!same_params(&finals[0].model.params, &other.model.params));
}

#[test]
fn resumed_run_continues_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let samples = data();
    ctcal::dataset::write_dataset(&samples, &GenerationSpec::default().palette, &data_dir).unwrap();

    let full = TrainConfig { steps: 110, ..small(Mode::Ctcal) };
    run_training(&full, &data_dir, &dir.path().join("full"), None).unwrap();
    let first = TrainConfig { steps: 100, ..full.clone() };
    run_training(&first, &data_dir, &dir.path().join("split"), None).unwrap();
    let ckpt = dir.path().join("split/checkpoint");
    let resumed = run_training(&full, &data_dir, &dir.path().join("split"), Some(&ckpt)).unwrap();
    assert_eq!(resumed.steps, 110);

    let lines = |run: &str| std::fs::read_to_string(dir.path().join(run).join("metrics.jsonl")).unwrap().lines().map(String::from).collect::<Vec<_>>();
    let (a, b) = (lines("full"), lines("split"));
    assert_eq!(a.len(), 110);
    assert_eq!(a, b);
    let (_, sa) = TrainState::load(&dir.path().join("full/checkpoint")).unwrap();
    let (_, sb) = TrainState::load(&ckpt).unwrap();
    assert_eq!(sa.step, 110);
    assert!(same_params(&sa.model.params, &sb.model.params));
    assert!(same_params(&sa.ae.params, &sb.ae.params));
    assert_eq!(sa.opt_model, sb.opt_model);
}

#[test]
fn teacher_maps_act_as_constants() {
    let samples = data();
    let cfg = small(Mode::Ctcal);
    let trainer = Trainer::new(cfg.clone(), &samples).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    let items32 = trainer.draw_batch(&mut state.rng);
    let model = state.model.cast::<f64>();
    let ae = state.ae.cast::<f64>();
    let items: Vec<StepItem<f64>> = items32
        .iter()
        .map(|it| StepItem {
            x0: it.x0.iter().map(|&v| v as f64).collect(),
            eps: it.eps.iter().map(|&v| v as f64).collect(),
            tokens: it.tokens.clone(),
            align: it.align.clone(),
            pair: it.pair,
        })
        .collect();
    let schedule = NoiseSchedule::ddpm(1000);
    let ctx = StepContext { model: &model, ae: &ae, adapter: None, schedule: &schedule, wiring: cfg.wiring(), ctcal: &cfg.ctcal };
    let live = compute_step(&ctx, &items, &TeacherSource::Live, true).unwrap();
    let constant = compute_step(&ctx, &items, &TeacherSource::Constant(live.teacher_maps.clone()), false).unwrap();

    let (stu, tea) = live.param_hashes.clone().unwrap();
    assert_eq!(stu, tea, "student and teacher must read the same parameters");
    assert_eq!(live.mean, constant.mean);
    let mut touched = 0;
    for (a, b) in live.model_grads.iter().zip(&constant.model_grads) {
        match (a, b) {
            (Some(a), Some(b)) => {
                assert!(a.max_abs_diff(b) <= 1e-12);
                touched += 1;
            }
            (None, None) => {}
            _ => panic!("gradient presence differs"),
        }
    }
    assert!(touched > 0);
    for (a, b) in live.ae_grads.iter().zip(&constant.ae_grads) {
        assert!(a.as_ref().unwrap().max_abs_diff(b.as_ref().unwrap()) <= 1e-12);
    }
    let wrong = TeacherSource::Constant(vec![live.teacher_maps[0].clone()]);
    assert!(matches!(compute_step(&ctx, &items, &wrong, false), Err(Error::ShapeMismatch(_))));
}

#[test]
fn adapter_training_leaves_the_base_untouched() {
    let samples = data();
    let cfg = TrainConfig { adapter: Some(AdapterConfig::default()), ..small(Mode::Ctcal) };
    let trainer = Trainer::new(cfg.clone(), &samples).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    let base = state.model.params.clone();
    let adapter0 = state.adapter.clone().unwrap();
    trainer.run(&mut state, |_, _| Ok(())).unwrap();
    assert!(same_params(&base, &state.model.params));
    let adapter = state.adapter.clone().unwrap();
    assert!(!same_params(&adapter0.params, &adapter.params));
    assert!(adapter.pairs.iter().all(|&(t, _, _)| !base.name(t).starts_with("text.")));

    let mut merged = base.clone();
    adapter.merge(&mut merged);
    assert!(!same_params(&merged, &base));
    adapter.unmerge(&mut merged);
    for ((_, _, a), (_, _, b)) in merged.iter().zip(base.iter()) {
        assert!(a.max_abs_diff(b) <= 1e-6);
    }
}

#[test]
fn low_rank_update_matches_hand_product() {
    let mut base = ParamStore::<f64>::new();
    base.add("blk.attn.wq.w", Tensor::from_fn(&[4, 4], |i| i as f64));
    base.add("blk.mlp.w", Tensor::zeros(&[4, 4]));
    assert_eq!(attention_targets(&base), vec!["blk.attn.wq.w".to_string()]);
    let cfg = AdapterConfig { rank: 2, alpha: 3.0 };
    assert!(matches!(LoraAdapter::new(&base, &["nope.wq.w".into()], cfg, 0), Err(Error::TargetNotFound(_))));
    let mut a = LoraAdapter::new(&base, &attention_targets(&base), cfg, 0).unwrap();
    let (_, down, up) = a.pairs[0];
    a.params.get_mut(up).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64 - 0.2);
    let (d, u) = (a.params.get(down).clone(), a.params.get(up).clone());
    let mut merged = base.clone();
    a.merge(&mut merged);
    for r in 0..4 {
        for c in 0..4 {
            let prod: f64 = (0..2).map(|k| d.data()[r * 2 + k] * u.data()[k * 4 + c]).sum();
            let want = (r * 4 + c) as f64 + 1.5 * prod;
            assert!((merged.by_name("blk.attn.wq.w").unwrap().data()[r * 4 + c] - want).abs() < 1e-12);
        }
    }
    assert_eq!(merged.by_name("blk.mlp.w").unwrap(), base.by_name("blk.mlp.w").unwrap());
}

#[test]
fn zero_gradients_do_not_move_parameters() {
    let mut params = ParamStore::<f32>::new();
    params.add("w", Tensor::from_fn(&[3, 2], |i| i as f32));
    let before = params.clone();
    let mut opt = AdamState::new(&params);
    let touched = opt.update(&AdamConfig::default(), &mut params, &[Some(Tensor::zeros(&[3, 2]))]).unwrap();
    assert_eq!(touched, 0);
    assert!(same_params(&before, &params));
    assert_eq!(opt.counts, vec![0]);
    opt.update(&AdamConfig::default(), &mut params, &[None]).unwrap();
    assert!(same_params(&before, &params));
}

#[test]
fn smoke_run_reduces_the_loss_and_logs_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    ctcal::dataset::write_dataset(&data(), &GenerationSpec::default().palette, &data_dir).unwrap();
    let cfg = TrainConfig { steps: 200, batch_size: 4, ..small(Mode::Baseline) };
    let summary = run_training(&cfg, &data_dir, &dir.path().join("run"), None).unwrap();
    assert_eq!(summary.steps, 200);
    let text = std::fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    let recs: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 200);
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r["step"].as_u64(), Some(i as u64));
        assert_eq!(r["total"], r["diffusion"], "baseline total must equal the diffusion loss");
        assert_eq!(r["pixel"].as_f64(), Some(0.0));
    }
    let mean = |s: &[serde_json::Value]| s.iter().map(|r| r["diffusion"].as_f64().unwrap()).sum::<f64>() / s.len() as f64;
    let (head, tail) = (mean(&recs[..25]), mean(&recs[175..]));
    assert!(tail < head, "{head} -> {tail}");
    assert!(dir.path().join("run/checkpoint/state.json").exists());
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(TrainState::load(&dir.path().join("nothing")), Err(Error::UntrainedModel(_))));
    assert!(matches!(ctcal::train::load_trained_model(&dir.path().join("model.ckpt")), Err(Error::UntrainedModel(_))));
}
