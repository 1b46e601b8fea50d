//! Run a miniature ablation plan end to end: train each variant, evaluate it, tabulate, and check assertions.
//!
//! Usage: `cargo run --release --example ablation_plan [steps] [out_dir]`

use std::path::PathBuf;

use ctcal::dataset::write_dataset;
use ctcal::eval::EvalConfig;
use ctcal::experiments::{ablate_in, Assertion, ExperimentPlan, PlanRun};
use ctcal::scene::{generate, GenerationSpec};
use ctcal::train::TrainConfig;

fn main() -> ctcal::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(60);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ctcal-ablation-plan"));
    let train = GenerationSpec { seed: 5, count: 128, ..Default::default() };
    let held_out = GenerationSpec { seed: 6, count: 32, ..Default::default() };
    write_dataset(&generate(&train)?, &train.palette, &out.join("train"))?;
    write_dataset(&generate(&held_out)?, &held_out.palette, &out.join("eval"))?;

    let run = |name: &str, overrides: &[&str]| PlanRun { name: name.into(), overrides: overrides.iter().map(|s| s.to_string()).collect() };
    let plan = ExperimentPlan {
        name: "mini".into(),
        data: out.join("train"),
        eval_data: Some(out.join("eval")),
        seeds: vec![0, 1],
        output: out.join("runs"),
        base: TrainConfig { steps, checkpoint_every: steps, ..Default::default() },
        runs: vec![run("baseline", &["mode=baseline"]), run("e", &["mode=e"]), run("a", &["mode=a"])],
        eval: EvalConfig { prompts: 16, curve_samples: 8, seeds: vec![0], diversity_prompts: 2, diversity_images: 4, ..Default::default() },
        reference: "baseline".into(),
        assertions: vec![Assertion::Within { variant: "e".into(), metric: "iou_high_t".into(), min: 0.0, max: 1.0, min_seeds: 2 }],
    };
    let table = ablate_in(&plan, &plan.output)?;
    println!("{}", table.render());
    println!("all assertions passed: {}", table.all_passed());
    Ok(())
}
