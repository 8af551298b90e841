#![allow(clippy::needless_range_loop)]

mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use common::{max_rel_diff, random_bundle, random_theory_params};
use sparc::debias::{image_debias, prompt_debias};
use sparc::eval::{average_precision, mean_average_precision};
use sparc::fusion::{
    fuse_kmax, fuse_maxvariance, fuse_mean_geq_k, max_variance_weights, order_statistics,
    projected_variance, sparc_pipeline, FusionConfig, Strategy as Fusion,
};
use sparc::io::{read_bundle, write_bundle};
use sparc::model::{
    validate_bundle, ClassVocabulary, CooccurrenceStats, LabelMatrix, PromptKind, PromptSpec,
    ScoreMatrix,
};
use sparc::noise::{compute_fvu, predict_f, NoiseFamily, NoiseModel};
use sparc::prompt_gen::{generate_compound_prompts, PromptGenConfig};
use sparc::rng::Stream;
use sparc::synthetic::{build_synthetic_bundle, PromptSet, SyntheticConfig};
use sparc::theory::{component_differences, derive_quantities, win_rate_monte_carlo};

fn matrix(rows: usize, cols: usize, seed: u64) -> ScoreMatrix {
    let mut r = Stream::new(seed, 0x1);
    ScoreMatrix::from_fn(
        (0..rows).map(|t| format!("i{t}")).collect(),
        (0..cols as u32).collect(),
        |_, c| r.normal() * (1.0 + c as f64) + c as f64,
    )
}

fn positive() -> impl Strategy<Value = f64> {
    (-3.0f64..3.0).prop_map(f64::exp)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn image_debias_ignores_row_affine_maps(
        rows in 2usize..20, cols in 2usize..8, seed in any::<u64>(),
        maps in prop::collection::vec((positive(), -10.0f64..10.0), 20),
    ) {
        let x = matrix(rows, cols, seed);
        let s = matrix(rows, cols, seed ^ 1);
        let apply = |m: &ScoreMatrix| {
            let mut out = m.clone();
            for t in 0..rows {
                for c in 0..cols {
                    out.set(t, c, maps[t].0 * m.get(t, c) + maps[t].1);
                }
            }
            out
        };
        let base = image_debias(&x, &s).unwrap();
        prop_assert!(base.values().iter().all(|v| v.is_finite()));
        prop_assert!(max_rel_diff(&base, &image_debias(&apply(&x), &apply(&s)).unwrap()) <= 1e-9);
    }

    #[test]
    fn prompt_debias_ignores_column_affine_maps_and_is_idempotent(
        rows in 2usize..20, cols in 1usize..8, seed in any::<u64>(),
        maps in prop::collection::vec((positive(), -10.0f64..10.0), 8),
    ) {
        let x = matrix(rows, cols, seed);
        let mut moved = x.clone();
        for t in 0..rows {
            for c in 0..cols {
                moved.set(t, c, maps[c].0 * x.get(t, c) + maps[c].1);
            }
        }
        let base = prompt_debias(&x).unwrap();
        prop_assert!(max_rel_diff(&base, &prompt_debias(&moved).unwrap()) <= 1e-9);
        let twice = prompt_debias(&base).unwrap();
        prop_assert!(base.values().iter().zip(twice.values()).all(|(a, b)| (a - b).abs() <= 1e-12));
    }

    #[test]
    fn max_variance_beats_random_directions(d in 1usize..6, n in 3usize..40, seed in any::<u64>()) {
        let m = matrix(n, d, seed);
        let cols: Vec<Vec<f64>> = (0..d).map(|c| m.column(c)).collect();
        let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
        let w = max_variance_weights(&refs, false).unwrap();
        prop_assert!((w.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(w[0] >= 0.0);
        let best = projected_variance(&refs, &w);
        let mut r = Stream::new(seed, 0x2);
        for _ in 0..200 {
            let mut u: Vec<f64> = (0..d).map(|_| r.normal()).collect();
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter_mut().for_each(|x| *x /= norm);
            prop_assert!(projected_variance(&refs, &u) <= best * (1.0 + 1e-9) + 1e-12);
        }
    }

    #[test]
    fn global_scale_keeps_weights_and_scales_fusion(n in 4usize..30, m in 1usize..5, seed in any::<u64>(), c in positive()) {
        let prompts: Vec<PromptSpec> = (0..m)
            .map(|k| PromptSpec::new(k as u32, format!("p{k}"), PromptKind::Compound, &[0, 1 + k]))
            .collect();
        let singleton = matrix(n, 1, seed).column(0);
        let compound = matrix(n, m, seed ^ 7);
        let mut scaled = compound.clone();
        scaled.values_mut().iter_mut().for_each(|v| *v *= c);
        let scaled_single: Vec<f64> = singleton.iter().map(|v| v * c).collect();

        let fuse = |s: &[f64], x: &ScoreMatrix| {
            let order = order_statistics(x, &prompts, 0).unwrap();
            let mut cols = vec![s.to_vec()];
            cols.extend((1..=m).map(|k| order.rank(k).unwrap()));
            let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
            let w = max_variance_weights(&refs, false).unwrap();
            (w.clone(), fuse_maxvariance(s, &order, &w).unwrap())
        };
        let (w, z) = fuse(&singleton, &compound);
        let (w2, z2) = fuse(&scaled_single, &scaled);
        prop_assert!(w.iter().zip(&w2).all(|(a, b)| (a - b).abs() <= 1e-10));
        prop_assert!(z.iter().zip(&z2).all(|(a, b)| (a * c - b).abs() <= 1e-9 * (1.0 + b.abs())));
    }

    #[test]
    fn mean_of_all_ranks_is_the_plain_mean(n in 1usize..20, m in 1usize..6, seed in any::<u64>()) {
        let prompts: Vec<PromptSpec> = (0..m)
            .map(|k| PromptSpec::new(k as u32, format!("p{k}"), PromptKind::Compound, &[0, 1 + k]))
            .collect();
        let x = matrix(n, m, seed);
        let order = order_statistics(&x, &prompts, 0).unwrap();
        let mean = fuse_mean_geq_k(&order, 1).unwrap();
        for t in 0..n {
            let plain = x.row(t).iter().sum::<f64>() / m as f64;
            prop_assert!((mean[t] - plain).abs() <= 1e-12 * (1.0 + plain.abs()));
        }
        let top = fuse_kmax(&order, 1).unwrap();
        for t in 0..n {
            prop_assert_eq!(top[t], x.row(t).iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
    }

    #[test]
    fn average_precision_ignores_increasing_transforms(
        scores in prop::collection::vec(-5.0f64..5.0, 1..40),
        bits in prop::collection::vec(any::<bool>(), 40),
    ) {
        let mut labels: Vec<u8> = bits[..scores.len()].iter().map(|&b| u8::from(b)).collect();
        labels[0] = 1;
        let moved: Vec<f64> = scores.iter().map(|x| 3.0 * x + x.powi(3)).collect();
        prop_assert_eq!(average_precision(&scores, &labels).unwrap(), average_precision(&moved, &labels).unwrap());
        let ap = average_precision(&scores, &labels).unwrap();
        prop_assert!(ap > 0.0 && ap <= 1.0);
    }

    #[test]
    fn map_ignores_image_order(n in 3usize..30, seed in any::<u64>()) {
        let mut r = Stream::new(seed, 0x3);
        let cols = 3;
        let scores = matrix(n, cols, seed);
        let labels: Vec<u8> = (0..n * cols).map(|_| u8::from(r.bernoulli(0.4))).collect();
        let y = LabelMatrix::new(labels.clone(), scores.image_ids.clone(), cols).unwrap();
        let names: Vec<String> = (0..cols).map(|c| format!("c{c}")).collect();
        let Ok(base) = mean_average_precision(&scores, &y, &names, "m", "d") else { return Ok(()) };

        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.below(i + 1));
        }
        let ids: Vec<String> = perm.iter().map(|&t| scores.image_ids[t].clone()).collect();
        let ps = ScoreMatrix::from_fn(ids.clone(), scores.prompt_ids.clone(), |t, c| scores.get(perm[t], c));
        let py = LabelMatrix::new(perm.iter().flat_map(|&t| labels[t * cols..(t + 1) * cols].to_vec()).collect(), ids, cols).unwrap();
        let moved = mean_average_precision(&ps, &py, &names, "m", "d").unwrap();
        prop_assert!((base.map - moved.map).abs() <= 1e-15);
    }

    #[test]
    fn fvu_ignores_a_common_shift(values in prop::collection::vec(-3.0f64..3.0, 3..30), shift in -100.0f64..100.0) {
        let preds: Vec<f64> = values.iter().map(|v| 0.5 * v + 0.1).collect();
        let Ok(base) = compute_fvu(&preds, &values) else { return Ok(()) };
        let sp: Vec<f64> = preds.iter().map(|v| v + shift).collect();
        let sv: Vec<f64> = values.iter().map(|v| v + shift).collect();
        prop_assert!((base - compute_fvu(&sp, &sv).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn zero_bonus_predicts_like_or(u in prop::collection::vec(-1.0f64..0.0, 3), gap in prop::collection::vec(0.1f64..2.0, 3)) {
        let v: Vec<f64> = u.iter().zip(&gap).map(|(a, g)| a + g).collect();
        let bonus = NoiseModel::static_bonus(u.clone(), v.clone(), 0.0);
        let or = NoiseModel::class_values(NoiseFamily::OnlyOr, u, v);
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            for y in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                prop_assert_eq!(predict_f(&bonus, (i, j), y).unwrap(), predict_f(&or, (i, j), y).unwrap());
            }
        }
    }

    #[test]
    fn lemmas_hold_for_random_parameters(seed in any::<u64>()) {
        let mut r = Stream::new(seed, 0x4);
        let p = random_theory_params(&mut r, 80);
        let d = derive_quantities(&p).unwrap();
        prop_assert!(1.0 > d.rho_prime && d.rho_prime > d.q_prime && d.q_prime > 0.0);
        prop_assert!(component_differences(&p).unwrap().sum().abs() <= 1e-12);
    }

    #[test]
    fn prompt_generation_is_monotone_in_tau2(
        probs in prop::collection::vec(0.0f64..1.0, 16),
        t_lo in 0.0f64..1.0, t_hi in 0.0f64..1.0,
    ) {
        let (lo, hi) = if t_lo <= t_hi { (t_lo, t_hi) } else { (t_hi, t_lo) };
        let n = 4;
        let pairs: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| probs[i * n + j]).collect()).collect();
        let labels_free = CooccurrenceStats::from_pairs(pairs, Default::default()).unwrap();
        let vocab = ClassVocabulary::new(["a", "b", "c", "d"]).unwrap();
        let gen = |tau2| {
            let cfg = PromptGenConfig { tau2, tau3: 0.0, ..PromptGenConfig::default() };
            generate_compound_prompts(&vocab, &labels_free, &cfg).unwrap()
        };
        let (a, b) = (gen(lo), gen(hi));
        prop_assert_eq!(&a, &gen(lo));
        let sets = |ps: &[PromptSpec]| ps.iter().map(|p| p.class_set.clone()).collect::<BTreeSet<_>>();
        prop_assert!(sets(&b).is_subset(&sets(&a)));
        for ps in [&a, &b] {
            prop_assert!(ps.iter().all(|p| (2..=3).contains(&p.class_set.len())));
            let triplets: Vec<_> = ps.iter().filter(|p| p.class_set.len() == 3).map(|p| &p.class_set).collect();
            prop_assert_eq!(triplets.iter().collect::<BTreeSet<_>>().len(), triplets.len());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bundles_round_trip_and_validate_identically(seed in any::<u64>()) {
        let bundle = random_bundle(seed);
        prop_assert!(validate_bundle(&bundle).is_empty());
        prop_assert_eq!(validate_bundle(&bundle), validate_bundle(&bundle));
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&bundle, dir.path(), false).unwrap();
        let back = read_bundle(dir.path()).unwrap();
        prop_assert_eq!(&back, &bundle);
        prop_assert_eq!(validate_bundle(&back), validate_bundle(&bundle));
    }

    #[test]
    fn pipeline_ignores_per_image_affine_maps(seed in any::<u64>(), alpha in positive(), beta in -5.0f64..5.0) {
        let bundle = random_bundle(seed);
        let cfg = FusionConfig { permissive: true, ..FusionConfig::default() };
        let base = sparc_pipeline(&bundle, &cfg).unwrap().refined;
        let mut moved = bundle.clone();
        for m in [&mut moved.singleton, &mut moved.auxiliary, &mut moved.compound] {
            for t in 0..m.rows() {
                let a = alpha * (1.0 + t as f64 / 10.0);
                for c in 0..m.cols() {
                    let v = m.get(t, c);
                    m.set(t, c, a * v + beta * t as f64);
                }
            }
        }
        prop_assert!(max_rel_diff(&base, &sparc_pipeline(&moved, &cfg).unwrap().refined) <= 1e-8);
        // same input, same output
        prop_assert_eq!(&base, &sparc_pipeline(&bundle, &cfg).unwrap().refined);
    }

    #[test]
    fn synthetic_bundles_are_deterministic(seed in any::<u64>()) {
        let cfg = SyntheticConfig { num_classes: 5, num_images: 40, prompts: PromptSet::AllPairs, seed, ..SyntheticConfig::default() };
        let a = build_synthetic_bundle(&cfg).unwrap();
        prop_assert!(validate_bundle(&a).is_empty());
        prop_assert_eq!(a, build_synthetic_bundle(&cfg).unwrap());
    }

    #[test]
    fn monte_carlo_is_a_function_of_its_seed(seed in any::<u64>()) {
        let mut r = Stream::new(seed, 0x5);
        let p = random_theory_params(&mut r, 10);
        let a = win_rate_monte_carlo(&p, 5_000, seed).unwrap();
        prop_assert_eq!(a, win_rate_monte_carlo(&p, 5_000, seed).unwrap());
        prop_assert!(a.estimate.abs() <= 1.0);
    }
}

/// Refinement never breaks a ranking that is already perfect when the
/// compound scores are noiseless.
#[test]
fn noiseless_perfect_singleton_ranking_survives_refinement() {
    let mut perfect = 0;
    for seed in 0..100 {
        let cfg = SyntheticConfig {
            num_classes: 6,
            num_images: 200,
            nu: 0.0,
            sigma: 0.0,
            delta: 0.5,
            prompts: PromptSet::AllPairs,
            seed,
            ..SyntheticConfig::default()
        };
        let bundle = build_synthetic_bundle(&cfg).unwrap();
        let labels = bundle.labels.clone().unwrap();
        let out =
            sparc_pipeline(&bundle, &FusionConfig::with_strategy(Fusion::MaxVariance)).unwrap();
        let y0 = labels.column(0);
        if average_precision(&out.debiased_singleton.column(0), &y0).unwrap() == 1.0 {
            perfect += 1;
            assert_eq!(
                average_precision(&out.refined.column(0), &y0).unwrap(),
                1.0,
                "seed {seed}"
            );
        }
    }
    assert!(
        perfect > 10,
        "only {perfect} seeds had a perfect singleton ranking"
    );
}
