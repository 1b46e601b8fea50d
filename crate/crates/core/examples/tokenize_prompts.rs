//! Tokenize compositional prompts, tag parts of speech, and pick the tokens calibration aligns.

use ctcal::prompts::{select_content_indices, select_noun_indices, tokenize, PromptSpec};
use ctcal::scene::{Cell, Color, Relation, Shape, SubjectSpec};

fn main() -> ctcal::Result<()> {
    for text in ["a red square", "a blue circle to the left of a green triangle", "a yellow square and a purple circle"] {
        let tokens = tokenize(text)?;
        let tagged: Vec<String> = tokens.iter().map(|t| format!("{}/{:?}", t.surface, t.pos)).collect();
        let nouns = select_noun_indices(&tokens)?;
        let content = select_content_indices(&tokens, true)?;
        println!("{text}");
        println!("  tags:     {}", tagged.join(" "));
        println!("  nouns:    {:?}", nouns.indices());
        println!("  +adjs:    {:?}", content.indices());
    }

    // structured scenes realize to text deterministically
    let scene = vec![
        SubjectSpec { shape: Shape::Triangle, color: Color::Orange, cell: Cell { row: 0, col: 0 } },
        SubjectSpec { shape: Shape::Circle, color: Color::Green, cell: Cell { row: 1, col: 0 } },
    ];
    let spec = PromptSpec::new(scene, Relation::Above)?;
    println!("{} -> ids {:?}, subject nouns {:?}", spec.text, spec.token_ids(), spec.subject_noun_positions()?);

    match tokenize("a red octagon") {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!("octagon is not in the lexicon"),
    }
    Ok(())
}
