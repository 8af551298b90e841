//! Generate a small synthetic bundle, write it to disk and read it back.

use sparc::io::{read_bundle, write_bundle};
use sparc::synthetic::{build_synthetic_bundle, PromptSet, SyntheticConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SyntheticConfig {
        num_classes: 6,
        num_images: 200,
        prompts: PromptSet::AllPairs,
        seed: 7,
        ..SyntheticConfig::default()
    };
    let bundle = build_synthetic_bundle(&cfg)?;
    let dir = tempfile::tempdir()?;
    write_bundle(&bundle, dir.path(), false)?;
    let back = read_bundle(dir.path())?;
    assert_eq!(back, bundle);
    println!(
        "{} images, {} classes, {} compound prompts written to {}",
        back.num_images(),
        back.num_classes(),
        back.compound.cols(),
        dir.path().display()
    );
    print!("{}", cfg.to_text());
    Ok(())
}
