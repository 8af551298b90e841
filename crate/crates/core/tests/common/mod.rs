#![allow(dead_code)]

use sparc::model::{ScoreBundle, ScoreMatrix};
use sparc::noise::NoiseFamily;
use sparc::rng::Stream;
use sparc::synthetic::{build_synthetic_bundle, PromptSet, SyntheticConfig};
use sparc::theory::TheoryParams;

/// Small synthetic bundle with randomized shape and generator settings.
pub fn random_bundle(seed: u64) -> ScoreBundle {
    let mut r = Stream::new(seed, 0xb0);
    let num_classes = 3 + r.below(5);
    let prompts = if r.bernoulli(0.5) {
        PromptSet::AllPairs
    } else {
        PromptSet::Star(1 + r.below(num_classes - 1))
    };
    let rho = r.uniform_range(0.2, 0.9);
    let cfg = SyntheticConfig {
        num_classes,
        num_images: 10 + r.below(60),
        p0: r.uniform_range(0.2, 0.6),
        rho,
        q: r.uniform_range(0.01, rho * 0.9),
        nu: r.uniform_range(0.0, 0.3),
        family: NoiseFamily::ALL[r.below(NoiseFamily::ALL.len() - 1) + 1],
        delta: r.uniform_range(0.0, 1.0),
        sigma: r.uniform_range(0.1, 1.0),
        prompts,
        seed,
        ..SyntheticConfig::default()
    };
    build_synthetic_bundle(&cfg).expect("random bundle")
}

/// Largest `|a - b| / (1 + |a|)` over all cells.
pub fn max_rel_diff(a: &ScoreMatrix, b: &ScoreMatrix) -> f64 {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs() / (1.0 + x.abs()))
        .fold(0.0, f64::max)
}

/// Valid parameters with `pi` drawn uniformly from the simplex.
pub fn random_theory_params(r: &mut Stream, m_max: usize) -> TheoryParams {
    let rho = r.uniform_range(0.05, 0.95);
    let q = r.uniform_range(0.01 * rho, 0.95 * rho);
    let e: Vec<f64> = (0..4).map(|_| -r.uniform().max(1e-300).ln()).collect();
    let total: f64 = e.iter().sum();
    TheoryParams {
        rho,
        q,
        nu: r.uniform_range(0.0, 0.45),
        m: 2 + r.below(m_max - 1),
        pi00: e[0] / total,
        pi11: e[1] / total,
        pi01: e[2] / total,
        pi10: e[3] / total,
    }
}

// Written straight to stdout so the line shows even when the harness captures output.
pub fn report(criterion: u32, name: &str, pass: bool, detail: impl std::fmt::Display) {
    use std::io::Write;
    let line = format!(
        "criterion {criterion:>2} {name:<28} {}  {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
}
