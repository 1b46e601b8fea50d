//! Record cross-attention in both denoiser variants and aggregate it into per-token maps.
//!
//! Usage: `cargo run --example attention_maps [out_dir]`

use std::path::PathBuf;

use ctcal::diffusion::{add_noise, to_model_range, NoiseSchedule};
use ctcal::eval::iou::eval_noise;
use ctcal::eval::render::render_heatmaps;
use ctcal::model::{Branch, Model, ModelConfig, Variant};
use ctcal::scene::{generate, GenerationSpec};
use ctcal_autodiff::{Graph, Tensor};

fn main() -> ctcal::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ctcal-attention-maps"));
    let sample = generate(&GenerationSpec { seed: 3, count: 1, ..Default::default() })?.remove(0);
    let schedule = NoiseSchedule::ddpm(1000);
    let x0 = to_model_range(&sample.image);
    let xt = add_noise(&x0, &eval_noise(0, 0, x0.len()), 300, &schedule)?;
    let tokens = sample.prompt.token_ids();
    println!("prompt: {}", sample.prompt.text);

    for variant in [Variant::CrossAttnUnet, Variant::MmDit] {
        let model = Model::<f32>::new(ModelConfig { variant, ..Default::default() }, 0)?;
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let x = g.constant(Tensor::new(&[1, 3, 32, 32], xt.clone())?);
        let fwd = model.forward(&mut g, &p, x, std::slice::from_ref(&tokens), &[300], Branch::Eval)?;
        for r in &fwd.records {
            let w = g.value(r.weights);
            let keys = *w.shape().last().unwrap();
            let worst = w.data().chunks(keys).map(|row| (row.iter().sum::<f32>() - 1.0).abs()).fold(0.0f32, f32::max);
            println!("  {variant:?} layer {} queries {:?} keys {keys}: max |row sum - 1| = {worst:.2e}", r.layer, r.query_hw);
        }
        let a = model.aggregate(&mut g, &fwd.records, 0)?;
        let values = g.value(a).clone();
        let surfaces: Vec<String> = sample.prompt.tokens.iter().map(|t| t.surface.clone()).collect();
        let dir = out.join(format!("{variant:?}").to_lowercase());
        let files = render_heatmaps(values.data(), (16, 16), &surfaces, &dir, 8)?;
        println!("  aggregated {:?}; {} heatmaps in {}", values.shape(), files.len(), dir.display());
    }
    Ok(())
}
