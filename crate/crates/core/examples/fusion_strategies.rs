//! Compare fusion strategies with and without merging on a synthetic bundle.

use sparc::eval::{compare_methods, default_strategies};
use sparc::fusion::{sparc_pipeline, FusionConfig};
use sparc::synthetic::{build_synthetic_bundle, SyntheticConfig};

fn main() -> sparc::error::Result<()> {
    let bundle = build_synthetic_bundle(&SyntheticConfig::default())?;
    let out = sparc_pipeline(&bundle, &FusionConfig::default())?;
    let target = &out.classes[0];
    println!(
        "class 0: {} compound prompts, weights {:?}",
        target.m, target.weights
    );
    let table = compare_methods(&bundle, &default_strategies(3), "synthetic")?;
    print!("{}", table.to_pretty());
    Ok(())
}
