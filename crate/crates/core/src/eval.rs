//! Ranking metrics and method comparison.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::debias::debias_bundle;
use crate::error::{Result, SparcError};
use crate::fusion::{fuse_debiased, FusionConfig, Strategy};
use crate::model::{LabelMatrix, ScoreBundle, ScoreMatrix};

/// All-points average precision: images are ranked by descending score, ties
/// broken by ascending index, and precision is averaged over the ranks of the
/// positives.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(SparcError::LengthMismatch {
            expected: labels.len(),
            found: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(SparcError::invalid("scores must not be NaN"));
    }
    let positives = labels.iter().filter(|&&y| y != 0).count();
    if positives == 0 {
        return Err(SparcError::UndefinedAp);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &t) in order.iter().enumerate() {
        if labels[t] != 0 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub dataset: String,
    pub class_names: Vec<String>,
    /// `None` for classes without positives.
    pub ap: Vec<Option<f64>>,
    /// Mean over classes with a defined AP.
    pub map: f64,
    pub undefined: Vec<usize>,
}

impl EvalReport {
    /// `class,ap` rows followed by a `mAP` row; undefined APs are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,ap\n");
        for (name, ap) in self.class_names.iter().zip(&self.ap) {
            let _ = writeln!(
                out,
                "{name},{}",
                ap.map(|v| v.to_string()).unwrap_or_default()
            );
        }
        let _ = writeln!(out, "mAP,{}", self.map);
        out
    }

    /// Per-class AP sorted from best to worst, for bar charts.
    pub fn bar_chart_csv(&self) -> String {
        let mut rows: Vec<(&String, f64)> = self
            .class_names
            .iter()
            .zip(&self.ap)
            .filter_map(|(n, ap)| ap.map(|v| (n, v)))
            .collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
        let mut out = String::from("rank,class,ap\n");
        for (rank, (name, ap)) in rows.iter().enumerate() {
            let _ = writeln!(out, "{},{name},{ap}", rank + 1);
        }
        out
    }

    pub fn to_pretty(&self) -> String {
        let width = self
            .class_names
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(0)
            .max(5);
        let mut out = format!("{} on {}\n", self.method, self.dataset);
        for (name, ap) in self.class_names.iter().zip(&self.ap) {
            let cell = ap
                .map(|v| format!("{:6.2}", 100.0 * v))
                .unwrap_or_else(|| "     -".into());
            let _ = writeln!(out, "  {name:<width$}  {cell}");
        }
        let _ = writeln!(out, "  {:<width$}  {:6.2}", "mAP", 100.0 * self.map);
        out
    }
}

pub fn mean_average_precision(
    scores: &ScoreMatrix,
    labels: &LabelMatrix,
    class_names: &[String],
    method: &str,
    dataset: &str,
) -> Result<EvalReport> {
    if scores.image_ids != labels.image_ids {
        return Err(SparcError::invalid(
            "scores and labels must share image ids",
        ));
    }
    if scores.cols() != labels.cols() || class_names.len() != labels.cols() {
        return Err(SparcError::LengthMismatch {
            expected: labels.cols(),
            found: scores.cols(),
        });
    }
    let ap: Vec<Option<f64>> = (0..labels.cols())
        .into_par_iter()
        .map(
            |c| match average_precision(&scores.column(c), &labels.column(c)) {
                Ok(v) => Ok(Some(v)),
                Err(SparcError::UndefinedAp) => Ok(None),
                Err(e) => Err(e),
            },
        )
        .collect::<Result<_>>()?;
    let defined: Vec<f64> = ap.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(SparcError::UndefinedAp);
    }
    Ok(EvalReport {
        method: method.to_string(),
        dataset: dataset.to_string(),
        class_names: class_names.to_vec(),
        map: defined.iter().sum::<f64>() / defined.len() as f64,
        undefined: ap
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_none())
            .map(|(c, _)| c)
            .collect(),
        ap,
    })
}

/// Singleton, `kmax:1..=k`, `meangeq:1..=k` and max-variance.
pub fn default_strategies(k: usize) -> Vec<Strategy> {
    let mut out = vec![Strategy::Singleton];
    out.extend((1..=k).map(Strategy::KMax));
    out.extend((1..=k).map(Strategy::MeanGeq));
    out.push(Strategy::MaxVariance);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub without_merge: EvalReport,
    pub with_merge: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, strategy: Strategy) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,map_without_merge,map_with_merge\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{}",
                r.strategy, r.without_merge.map, r.with_merge.map
            );
        }
        out
    }

    pub fn to_pretty(&self) -> String {
        let mut out = format!("{:<14} {:>9} {:>9}\n", "strategy", "no merge", "merge");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<14} {:>9.2} {:>9.2}",
                r.strategy.to_string(),
                100.0 * r.without_merge.map,
                100.0 * r.with_merge.map
            );
        }
        out
    }
}

/// Evaluate each strategy with and without merging against the bundle's
/// labels. Ranks beyond a class's prompt count fall back to its last rank.
pub fn compare_methods(
    bundle: &ScoreBundle,
    strategies: &[Strategy],
    dataset: &str,
) -> Result<Comparison> {
    let labels = bundle
        .labels
        .as_ref()
        .ok_or_else(|| SparcError::invalid("comparing methods needs a labeled bundle"))?;
    let debiased = debias_bundle(bundle)?;
    let names = bundle.vocabulary.names();
    let run = |strategy: Strategy, merge: bool| -> Result<EvalReport> {
        let cfg = FusionConfig {
            strategy,
            merge,
            permissive: true,
            clamp_rank: true,
        };
        let out = fuse_debiased(
            &debiased.singleton,
            &debiased.compound,
            &bundle.prompts,
            &cfg,
        )?;
        let label = format!("{strategy}{}", if merge { "+merge" } else { "" });
        mean_average_precision(&out.refined, labels, names, &label, dataset)
    };
    let rows = strategies
        .iter()
        .map(|&s| {
            Ok(ComparisonRow {
                strategy: s,
                without_merge: run(s, false)?,
                with_merge: run(s, true)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Comparison { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        assert_eq!(
            average_precision(&[0.9, 0.8, 0.7], &[1, 1, 0]).unwrap(),
            1.0
        );
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!(matches!(
            average_precision(&[0.1, 0.2], &[0, 0]),
            Err(SparcError::UndefinedAp)
        ));
    }

    #[test]
    fn ties_follow_index_order() {
        assert_eq!(average_precision(&[0.5, 0.5], &[1, 0]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
    }

    fn labels(values: Vec<u8>, rows: usize, cols: usize) -> LabelMatrix {
        LabelMatrix::new(values, (0..rows).map(|t| format!("i{t}")).collect(), cols).unwrap()
    }

    #[test]
    fn map_skips_undefined_classes() {
        let y = labels(vec![1, 0, 1, 0, 0, 0], 3, 2);
        let s = ScoreMatrix::from_fn(y.image_ids.clone(), vec![0, 1], |t, c| {
            if c == 0 {
                -(t as f64)
            } else {
                t as f64
            }
        });
        let names = vec!["a".to_string(), "b".to_string()];
        let r = mean_average_precision(&s, &y, &names, "m", "d").unwrap();
        assert_eq!(r.ap, vec![Some(1.0), None]);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.undefined, vec![1]);
        assert!(r.to_csv().ends_with("b,\nmAP,1\n"));
        assert_eq!(r.bar_chart_csv(), "rank,class,ap\n1,a,1\n");
        let none = labels(vec![0; 6], 3, 2);
        assert!(mean_average_precision(&s, &none, &names, "m", "d").is_err());
    }

    #[test]
    fn perfect_scores() {
        let y = labels(vec![1, 0, 0, 1, 1, 1], 3, 2);
        let s = ScoreMatrix::from_fn(y.image_ids.clone(), vec![0, 1], |t, c| {
            f64::from(y.get(t, c))
        });
        let names = vec!["a".to_string(), "b".to_string()];
        assert_eq!(
            mean_average_precision(&s, &y, &names, "m", "d")
                .unwrap()
                .map,
            1.0
        );
    }

    #[test]
    fn comparison_table() {
        let b = crate::model::fixtures::small_bundle();
        let c = compare_methods(&b, &default_strategies(2), "fixture").unwrap();
        assert_eq!(c.rows.len(), 6);
        let s = c.row(Strategy::Singleton).unwrap();
        assert_eq!(s.without_merge.map, s.with_merge.map);
        assert_eq!(c.to_csv().lines().count(), 7);
    }
}
