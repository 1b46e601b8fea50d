//! Score images against their prompts with the rule-based binding oracle.

use ctcal::eval::oracle::{binding_oracle, components, BindingAccuracy};
use ctcal::scene::{generate, GenerationSpec, Palette};

fn main() -> ctcal::Result<()> {
    let palette = Palette::default();
    let data = generate(&GenerationSpec { seed: 11, count: 200, ..Default::default() })?;
    for s in data.iter().take(4) {
        let comps = components(&s.image, s.resolution, &palette);
        let found: Vec<String> = comps.iter().map(|c| format!("{:?} {:?} ({} px, fill {:.2})", c.color, c.shape, c.pixels, c.fill_ratio)).collect();
        println!("{:<48} {}", s.prompt.text, found.join("; "));
        println!("{:<48} {:?}", "", binding_oracle(&s.image, s.resolution, &s.prompt, &palette));
    }

    let verdicts: Vec<_> = data.iter().map(|s| binding_oracle(&s.image, s.resolution, &s.prompt, &palette)).collect();
    println!("ground-truth renders: {:?}", BindingAccuracy::from_verdicts(&verdicts));

    // pairing each image with the next prompt should mostly fail
    let swapped: Vec<_> = data.iter().zip(data.iter().cycle().skip(1)).map(|(s, other)| binding_oracle(&s.image, s.resolution, &other.prompt, &palette)).collect();
    println!("mismatched prompts:   {:?}", BindingAccuracy::from_verdicts(&swapped));
    Ok(())
}
