//! Fit every noise-model family to a synthetic bundle and print FVU.

use sparc::noise::{fit_all_families, fit_report_csv, CellTable, ScoreSource};
use sparc::synthetic::{build_synthetic_bundle, PromptSet, SyntheticConfig};

fn main() -> sparc::error::Result<()> {
    let bundle = build_synthetic_bundle(&SyntheticConfig {
        num_classes: 8,
        num_images: 1000,
        prompts: PromptSet::AllPairs,
        ..SyntheticConfig::default()
    })?;
    let table = CellTable::from_bundle(&bundle, ScoreSource::Debiased)?;
    let fits = fit_all_families(&table)?;
    print!("{}", fit_report_csv(&fits));
    Ok(())
}
