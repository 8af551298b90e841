//! Image- then prompt-level standardization of a bundle.

use sparc::debias::debias_bundle;
use sparc::synthetic::{build_synthetic_bundle, SyntheticConfig};

fn main() -> sparc::error::Result<()> {
    let bundle = build_synthetic_bundle(&SyntheticConfig {
        num_images: 300,
        ..SyntheticConfig::default()
    })?;
    let d = debias_bundle(&bundle)?;
    let raw = bundle.singleton.row(0);
    let fixed = d.singleton.row(0);
    println!("image 0, first five classes");
    for c in 0..5 {
        println!("  {:>8.4} -> {:>8.4}", raw[c], fixed[c]);
    }
    let s = &d.stats;
    println!(
        "image 0 singleton mean {:.4} sd {:.4}; class 0 prompt mean {:.4} sd {:.4}",
        s.singleton_image.mean[0],
        s.singleton_image.sd[0],
        s.singleton_prompt.mean[0],
        s.singleton_prompt.sd[0]
    );
    Ok(())
}
