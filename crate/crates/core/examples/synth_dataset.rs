//! Render a small synthetic scene dataset, write it to disk, and read it back with checksums.
//!
//! Usage: `cargo run --example synth_dataset [out_dir]`

use std::path::PathBuf;

use ctcal::dataset::{load_dataset, write_dataset};
use ctcal::eval::render::write_image_png;
use ctcal::scene::{generate, GenerationSpec, RelationPolicy, SubjectMode};

fn main() -> ctcal::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ctcal-synth-dataset"));
    let spec = GenerationSpec { seed: 7, count: 16, subjects: SubjectMode::Mixed, relations: RelationPolicy::Mixed, ..Default::default() };
    let samples = generate(&spec)?;
    for s in samples.iter().take(6) {
        let areas: Vec<String> = s.masks.iter().map(|m| format!("tok{}:{}px", m.position, m.mask.iter().filter(|&&v| v > 0.5).count())).collect();
        println!("{:<48} {}", s.prompt.text, areas.join(" "));
    }

    let manifest = write_dataset(&samples, &spec.palette, &out.join("data"))?;
    let back = load_dataset(&out.join("data"))?;
    assert_eq!(back, samples, "round trip must be exact");
    println!("wrote {} samples at {}px to {}", manifest.count, manifest.resolution, out.join("data").display());

    for (i, s) in samples.iter().take(4).enumerate() {
        write_image_png(&out.join(format!("scene_{i}.png")), &s.image, s.resolution, 4)?;
    }
    println!("previews in {}", out.display());
    Ok(())
}
