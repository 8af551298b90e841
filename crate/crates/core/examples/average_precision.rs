//! Per-class AP and mAP of debiased singleton scores against labels.

use sparc::debias::debias_bundle;
use sparc::eval::{average_precision, mean_average_precision};
use sparc::synthetic::{build_synthetic_bundle, SyntheticConfig};

fn main() -> sparc::error::Result<()> {
    let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0])?;
    println!("toy AP {ap:.4}");

    let bundle = build_synthetic_bundle(&SyntheticConfig::default())?;
    let d = debias_bundle(&bundle)?;
    let labels = bundle
        .labels
        .as_ref()
        .expect("synthetic bundles carry labels");
    let report = mean_average_precision(
        &d.singleton,
        labels,
        bundle.vocabulary.names(),
        "singleton",
        "synthetic",
    )?;
    print!("{}", report.to_pretty());
    Ok(())
}
