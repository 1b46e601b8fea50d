//! Attach a low-rank adapter to the attention projections, fine-tune it, and merge it back.

use ctcal::model::lora::{attention_targets, AdapterConfig};
use ctcal::scene::{generate, GenerationSpec};
use ctcal::train::{TrainConfig, TrainState, Trainer};

fn main() -> ctcal::Result<()> {
    let data = generate(&GenerationSpec { seed: 2, count: 64, ..Default::default() })?;
    let cfg = TrainConfig { steps: 40, adapter: Some(AdapterConfig { rank: 4, alpha: 4.0 }), ..Default::default() };
    let trainer = Trainer::new(cfg.clone(), &data)?;
    let mut state = TrainState::new(&cfg)?;
    let targets = attention_targets(&state.model.params);
    println!("{} adapted matrices, e.g. {:?}", targets.len(), &targets[..targets.len().min(3)]);

    let before = state.model.params.fingerprint();
    trainer.run(&mut state, |_, _| Ok(()))?;
    let after = state.model.params.fingerprint();
    println!("base weights unchanged by adapter training: {}", before == after);

    let adapter = state.adapter.as_ref().expect("adapter configured");
    let mut merged = state.model.params.clone();
    adapter.merge(&mut merged);
    println!("merged fingerprint differs from base: {}", merged.fingerprint() != before);
    adapter.unmerge(&mut merged);
    let drift = merged.iter().zip(state.model.params.iter()).map(|((_, _, a), (_, _, b))| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max)).fold(0.0f32, f32::max);
    println!("max |unmerge(merge(W)) - W| = {drift:.2e}");
    Ok(())
}
