//! Train a baseline briefly, then measure attention/mask alignment across timesteps and plot it.
//!
//! Usage: `cargo run --release --example iou_curve [steps] [out_dir]`

use std::path::PathBuf;

use ctcal::experiments::repro_fig2b;
use ctcal::scene::{generate, GenerationSpec};
use ctcal::train::{Mode, TrainConfig, TrainState, Trainer};

fn main() -> ctcal::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(500);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ctcal-iou-curve"));
    let train = generate(&GenerationSpec { seed: 100, count: 512, ..Default::default() })?;
    let held_out = generate(&GenerationSpec { seed: 999, count: 32, ..Default::default() })?;
    let cfg = TrainConfig { mode: Mode::Baseline, steps, ..Default::default() };
    let trainer = Trainer::new(cfg.clone(), &train)?;
    let mut state = TrainState::new(&cfg)?;
    trainer.run(&mut state, |_, _| Ok(()))?;

    let res = repro_fig2b(&state.model, trainer.schedule(), &held_out, &[0, 1], &out)?;
    for (t, (m, s)) in res.curve.timesteps.iter().zip(res.curve.mean.iter().zip(&res.curve.std)) {
        println!("t={t:>4} iou {m:.4} +- {s:.4}");
    }
    println!("spearman {:.3}, peak in lowest quartile: {}", res.spearman, res.peak_in_lowest_quartile);
    println!("curve.json and curve.png in {}", out.display());
    Ok(())
}
