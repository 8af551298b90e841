//! Compound prompts from label co-occurrence, plus randomized controls.

use sparc::model::{ClassVocabulary, CooccurrenceStats, LabelMatrix};
use sparc::prompt_gen::{generate_compound_prompts, generate_randomized_prompts, PromptGenConfig};

fn main() -> sparc::error::Result<()> {
    let vocab = ClassVocabulary::new(["person", "dog", "frisbee", "car"])?;
    // rows are images, columns follow the vocabulary
    let rows: [[u8; 4]; 6] = [
        [1, 1, 1, 0],
        [1, 1, 0, 0],
        [1, 0, 0, 1],
        [0, 1, 1, 0],
        [1, 1, 1, 0],
        [0, 0, 0, 1],
    ];
    let labels = LabelMatrix::new(
        rows.iter().flatten().copied().collect(),
        (0..rows.len()).map(|t| format!("img{t}")).collect(),
        vocab.len(),
    )?;
    let cooc = CooccurrenceStats::from_labels(&labels);
    let cfg = PromptGenConfig {
        tau2: 0.3,
        tau3: 0.5,
        ..PromptGenConfig::default()
    };
    for p in generate_compound_prompts(&vocab, &cooc, &cfg)? {
        println!("{:>3} {:?} {}", p.id, p.class_set, p.text);
    }
    for p in generate_randomized_prompts(&vocab, 1, 6, 3, 100) {
        println!("{:>3} {:?} {}", p.id, p.class_set, p.text);
    }
    Ok(())
}
