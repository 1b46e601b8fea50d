//! Train a small denoiser with cross-timestep calibration and watch every loss term.
//!
//! Usage: `cargo run --release --example micro_training [steps]`

use ctcal::scene::{generate, GenerationSpec};
use ctcal::train::{Mode, TrainConfig, TrainState, Trainer};

fn main() -> ctcal::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let data = generate(&GenerationSpec { seed: 1, count: 256, ..Default::default() })?;
    for mode in [Mode::Baseline, Mode::Ctcal] {
        let cfg = TrainConfig { mode, steps, seed: 0, ..Default::default() };
        let trainer = Trainer::new(cfg.clone(), &data)?;
        let mut state = TrainState::new(&cfg)?;
        let every = (steps / 6).max(1);
        println!("mode {mode:?}");
        trainer.run(&mut state, |s, rec| {
            if s.step % every == 0 || s.step == steps {
                let l = &rec.loss;
                println!(
                    "  step {:>5} total {:.4} diff {:.4} pix {:.5} sem {:.5} rec {:.5} reg {:.4} lambda_t {:.2}",
                    s.step, l.total, l.diffusion, l.pixel, l.semantic, l.reconstruction, l.subject_reg, l.lambda_t
                );
            }
            Ok(())
        })?;
    }
    Ok(())
}
