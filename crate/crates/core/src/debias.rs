//! Two-stage standardization of raw scores.
//!
//! Image level: each row of a target matrix is standardized with the mean and
//! population SD of the matching row of a statistics source (the singleton
//! matrix itself, or the auxiliary matrix for compound scores). Prompt level:
//! each column is then standardized across images.

use rayon::prelude::*;

use crate::error::{Axis, Result, SparcError};
use crate::model::{ScoreBundle, ScoreMatrix, ScoreStage};

/// Standard deviations below this are treated as a constant distribution.
pub const SD_FLOOR: f64 = 1e-12;

/// Mean and population SD, accumulated in index order.
pub fn mean_sd(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = xs.clone().fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    let mean = sum / n as f64;
    let ss = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>();
    (mean, (ss / n as f64).sqrt())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocationScale {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

/// Statistics recorded while debiasing a bundle.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DebiasStats {
    /// Per-image stats of the singleton matrix.
    pub singleton_image: LocationScale,
    /// Per-image stats of the auxiliary matrix (used for compound scores).
    pub compound_image: LocationScale,
    /// Per-class stats of image-debiased singleton scores.
    pub singleton_prompt: LocationScale,
    /// Per-prompt stats of image-debiased compound scores.
    pub compound_prompt: LocationScale,
}

fn image_stats(source: &ScoreMatrix, name: &str) -> Result<LocationScale> {
    let stats: Vec<(f64, f64)> = (0..source.rows())
        .into_par_iter()
        .map(|t| mean_sd(source.row(t).iter().copied()))
        .collect();
    if let Some((t, &(_, sd))) = stats
        .iter()
        .enumerate()
        .find(|(_, &(_, sd))| !(sd >= SD_FLOOR))
    {
        return Err(SparcError::DegenerateDistribution {
            matrix: name.to_string(),
            axis: Axis::Row,
            index: t,
            sd,
        });
    }
    Ok(LocationScale {
        mean: stats.iter().map(|s| s.0).collect(),
        sd: stats.iter().map(|s| s.1).collect(),
    })
}

fn image_debias_named(
    target: &ScoreMatrix,
    stats_source: &ScoreMatrix,
    name: &str,
) -> Result<(ScoreMatrix, LocationScale)> {
    if target.image_ids != stats_source.image_ids {
        return Err(SparcError::invalid(
            "target and statistics source must share image ids",
        ));
    }
    if stats_source.cols() < 2 {
        return Err(SparcError::invalid(
            "image-level statistics need at least 2 prompts",
        ));
    }
    let stats = image_stats(stats_source, name)?;
    let mut out = target.clone();
    let cols = out.cols();
    if cols > 0 {
        out.values_mut()
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(t, row)| {
                for v in row {
                    *v = (*v - stats.mean[t]) / stats.sd[t];
                }
            });
    }
    Ok((out.with_stage(ScoreStage::ImageDebiased), stats))
}

/// Standardize each row of `target` with the row statistics of `stats_source`.
pub fn image_debias(target: &ScoreMatrix, stats_source: &ScoreMatrix) -> Result<ScoreMatrix> {
    image_debias_named(target, stats_source, "statistics source").map(|(m, _)| m)
}

fn prompt_debias_named(scores: &ScoreMatrix, name: &str) -> Result<(ScoreMatrix, LocationScale)> {
    let (rows, cols) = (scores.rows(), scores.cols());
    if rows < 2 {
        return Err(SparcError::invalid(
            "prompt-level statistics need at least 2 images",
        ));
    }
    let stats: Vec<(f64, f64)> = (0..cols)
        .into_par_iter()
        .map(|c| mean_sd((0..rows).map(|t| scores.get(t, c))))
        .collect();
    if let Some((c, &(_, sd))) = stats
        .iter()
        .enumerate()
        .find(|(_, &(_, sd))| !(sd >= SD_FLOOR))
    {
        return Err(SparcError::DegenerateDistribution {
            matrix: name.to_string(),
            axis: Axis::Column,
            index: c,
            sd,
        });
    }
    let mut out = scores.clone();
    if cols > 0 {
        out.values_mut().par_chunks_mut(cols).for_each(|row| {
            for (v, &(mean, sd)) in row.iter_mut().zip(&stats) {
                *v = (*v - mean) / sd;
            }
        });
    }
    Ok((
        out.with_stage(ScoreStage::Debiased),
        LocationScale {
            mean: stats.iter().map(|s| s.0).collect(),
            sd: stats.iter().map(|s| s.1).collect(),
        },
    ))
}

/// Standardize each column across images.
pub fn prompt_debias(scores: &ScoreMatrix) -> Result<ScoreMatrix> {
    prompt_debias_named(scores, "scores").map(|(m, _)| m)
}

#[derive(Debug, Clone)]
pub struct DebiasedScores {
    pub singleton: ScoreMatrix,
    pub compound: ScoreMatrix,
    pub stats: DebiasStats,
}

/// Image-level then prompt-level debiasing of a bundle's singleton and
/// compound matrices. Compound rows are standardized with auxiliary row
/// statistics.
pub fn debias_bundle(bundle: &ScoreBundle) -> Result<DebiasedScores> {
    let (s_img, singleton_image) =
        image_debias_named(&bundle.singleton, &bundle.singleton, "singleton")?;
    let (c_img, compound_image) =
        image_debias_named(&bundle.compound, &bundle.auxiliary, "auxiliary")?;
    let (singleton, singleton_prompt) = prompt_debias_named(&s_img, "image-debiased singleton")?;
    let (compound, compound_prompt) = prompt_debias_named(&c_img, "image-debiased compound")?;
    Ok(DebiasedScores {
        singleton,
        compound,
        stats: DebiasStats {
            singleton_image,
            compound_image,
            singleton_prompt,
            compound_prompt,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> ScoreMatrix {
        let cols = rows[0].len();
        ScoreMatrix::new(
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
            (0..rows.len()).map(|t| format!("i{t}")).collect(),
            (0..cols as u32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn constant_row_is_degenerate() {
        let x = m(&[&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]]);
        match image_debias(&x, &x) {
            Err(SparcError::DegenerateDistribution {
                axis: Axis::Row,
                index: 1,
                ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn one_two_three() {
        let x = m(&[&[1.0, 2.0, 3.0]]);
        let out = image_debias(&x, &x).unwrap();
        let z = (1.5f64).sqrt(); // 1 / sqrt(2/3)
        assert!((out.get(0, 0) + z).abs() < 1e-15);
        assert_eq!(out.get(0, 1), 0.0);
        assert!((out.get(0, 2) - z).abs() < 1e-15);
    }

    #[test]
    fn constant_column_is_degenerate() {
        let x = m(&[&[5.0, 0.0], &[5.0, 2.0]]);
        match prompt_debias(&x) {
            Err(SparcError::DegenerateDistribution {
                axis: Axis::Column,
                index: 0,
                ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn two_point_column() {
        let x = m(&[&[0.0], &[2.0]]);
        assert_eq!(prompt_debias(&x).unwrap().values(), &[-1.0, 1.0]);
    }

    #[test]
    fn compound_uses_auxiliary_statistics() {
        let mut b = crate::model::fixtures::small_bundle();
        let d = debias_bundle(&b).unwrap();
        // changing the compound matrix's own row spread must not change the
        // image-level statistics
        for v in b.compound.values_mut() {
            *v *= 3.0;
        }
        let d2 = debias_bundle(&b).unwrap();
        assert_eq!(d.stats.compound_image, d2.stats.compound_image);
        assert_eq!(d.stats.singleton_image.mean.len(), 4);
    }

    #[test]
    fn too_few_images_or_prompts() {
        let one_row = m(&[&[0.0, 1.0]]);
        assert!(prompt_debias(&one_row).is_err());
        let one_col = m(&[&[0.0], &[1.0]]);
        assert!(image_debias(&one_col, &one_col).is_err());
    }
}
