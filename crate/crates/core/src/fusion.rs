//! Rank fusion of debiased compound scores.
//!
//! For class `i`, the compound prompts mentioning `i` give a per-image
//! multiset of debiased scores; sorting it descending yields the order
//! statistics `r_{i,1} >= r_{i,2} >= ...`. A strategy collapses
//! `[s_i | r_{i,.}]` to one fused column, which is then merged (added) onto
//! the debiased singleton score.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::debias::{debias_bundle, DebiasStats};
use crate::error::{Result, SparcError};
use crate::model::{PromptSpec, ScoreBundle, ScoreMatrix, ScoreStage};

pub const POWER_TOLERANCE: f64 = 1e-12;
pub const POWER_MAX_ITERATIONS: usize = 10_000;
const ZERO_COVARIANCE: f64 = 1e-12;

/// Per-image order statistics for one class: row `t` holds the debiased
/// compound scores of the prompts mentioning the class, sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderStats {
    pub class: usize,
    rows: usize,
    m: usize,
    values: Vec<f64>,
}

impl OrderStats {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of compound prompts mentioning the class.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.m..(t + 1) * self.m]
    }

    /// `r_{i,k}` for 1-based rank `k`.
    pub fn rank(&self, k: usize) -> Result<Vec<f64>> {
        if k == 0 || k > self.m {
            return Err(SparcError::RankOutOfRange {
                rank: k,
                max: self.m,
            });
        }
        Ok((0..self.rows)
            .map(|t| self.values[t * self.m + k - 1])
            .collect())
    }
}

/// Sort the scores of every compound prompt mentioning `class` per image.
pub fn order_statistics(
    compound: &ScoreMatrix,
    prompts: &[PromptSpec],
    class: usize,
) -> Result<OrderStats> {
    let by_id: HashMap<u32, &PromptSpec> = prompts.iter().map(|p| (p.id, p)).collect();
    let mut cols = Vec::new();
    for (c, id) in compound.prompt_ids.iter().enumerate() {
        let p = by_id.get(id).ok_or_else(|| {
            SparcError::invalid(format!("compound column {c} has unknown prompt id {id}"))
        })?;
        if p.mentions(class) {
            cols.push(c);
        }
    }
    order_statistics_for_columns(compound, &cols, class)
}

fn order_statistics_for_columns(
    compound: &ScoreMatrix,
    cols: &[usize],
    class: usize,
) -> Result<OrderStats> {
    if cols.is_empty() {
        return Err(SparcError::NoCompoundPrompts(class));
    }
    let (rows, m) = (compound.rows(), cols.len());
    let mut values = Vec::with_capacity(rows * m);
    for t in 0..rows {
        let start = values.len();
        values.extend(cols.iter().map(|&c| compound.get(t, c)));
        values[start..].sort_by(|a, b| b.total_cmp(a));
    }
    Ok(OrderStats {
        class,
        rows,
        m,
        values,
    })
}

fn column_means(columns: &[&[f64]]) -> Vec<f64> {
    columns
        .iter()
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

/// Population covariance of the given columns, row-major `d x d`.
pub fn covariance(columns: &[&[f64]]) -> Vec<f64> {
    let d = columns.len();
    let means = column_means(columns);
    let n = columns.first().map_or(0, |c| c.len());
    let mut cov = vec![0.0; d * d];
    for a in 0..d {
        for b in a..d {
            let s: f64 = (0..n)
                .map(|t| (columns[a][t] - means[a]) * (columns[b][t] - means[b]))
                .sum();
            cov[a * d + b] = s / n as f64;
            cov[b * d + a] = s / n as f64;
        }
    }
    cov
}

/// Population variance of `sum_k w_k x_k` across rows.
pub fn projected_variance(columns: &[&[f64]], w: &[f64]) -> f64 {
    let n = columns[0].len();
    let proj: Vec<f64> = (0..n)
        .map(|t| columns.iter().zip(w).map(|(c, wk)| c[t] * wk).sum())
        .collect();
    let mean = proj.iter().sum::<f64>() / n as f64;
    proj.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n as f64
}

fn mat_vec(c: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d)
        .map(|a| (0..d).map(|b| c[a * d + b] * v[b]).sum())
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rayleigh(c: &[f64], v: &[f64]) -> f64 {
    mat_vec(c, v).iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Power iteration from `start`; stops when the unit direction moves less
/// than the tolerance between iterations.
fn power_iteration(c: &[f64], start: Vec<f64>) -> Vec<f64> {
    let mut v = start;
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    for _ in 0..POWER_MAX_ITERATIONS {
        let mut y = mat_vec(c, &v);
        let ny = norm(&y);
        if ny == 0.0 {
            break;
        }
        y.iter_mut().for_each(|x| *x /= ny);
        let change = y
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        v = y;
        if change < POWER_TOLERANCE {
            break;
        }
    }
    v
}

/// Leading eigenvector of a symmetric PSD matrix, starting from the
/// normalized all-ones vector.
///
/// If the start is (numerically) orthogonal to the leading eigenvector the
/// iteration settles on a lower eigenvalue; a deflated pass detects that and
/// restarts from the larger direction.
pub fn leading_eigenvector(c: &[f64], d: usize) -> Vec<f64> {
    let mut v = power_iteration(c, vec![1.0; d]);
    for _ in 0..d {
        let lambda = rayleigh(c, &v);
        let deflated: Vec<f64> = (0..d * d)
            .map(|idx| c[idx] - lambda * v[idx / d] * v[idx % d])
            .collect();
        let (best_col, best_norm) = (0..d)
            .map(|b| {
                (
                    b,
                    (0..d)
                        .map(|a| deflated[a * d + b].powi(2))
                        .sum::<f64>()
                        .sqrt(),
                )
            })
            .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best_norm <= ZERO_COVARIANCE * lambda.abs().max(1.0) {
            break;
        }
        let start: Vec<f64> = (0..d).map(|a| deflated[a * d + best_col]).collect();
        let u = power_iteration(&deflated, start);
        if rayleigh(c, &u) > lambda * (1.0 + 1e-9) + ZERO_COVARIANCE {
            v = power_iteration(c, u);
        } else {
            break;
        }
    }
    v
}

/// Unit vector maximizing the variance of `X w` over rows of
/// `X = [columns...]`, with the sign fixed so that `w[0] >= 0` (or, when
/// `w[0]` vanishes, so that the entries sum to a non-negative value).
///
/// A zero covariance is an error unless `permissive`, in which case the
/// slot-0 indicator is returned.
pub fn max_variance_weights(columns: &[&[f64]], permissive: bool) -> Result<Vec<f64>> {
    let d = columns.len();
    if d == 0 {
        return Err(SparcError::invalid(
            "max-variance fusion needs at least one column",
        ));
    }
    let n = columns[0].len();
    if n < 2 {
        return Err(SparcError::invalid(
            "max-variance fusion needs at least 2 rows",
        ));
    }
    if let Some(bad) = columns.iter().find(|c| c.len() != n) {
        return Err(SparcError::LengthMismatch {
            expected: n,
            found: bad.len(),
        });
    }
    if columns.iter().any(|c| c.iter().any(|v| !v.is_finite())) {
        return Err(SparcError::invalid("max-variance input must be finite"));
    }
    let cov = covariance(columns);
    if cov.iter().all(|c| c.abs() < ZERO_COVARIANCE) {
        if permissive {
            let mut w = vec![0.0; d];
            w[0] = 1.0;
            return Ok(w);
        }
        return Err(SparcError::DegenerateCovariance);
    }
    if d == 1 {
        return Ok(vec![1.0]);
    }
    let mut w = leading_eigenvector(&cov, d);
    let flip = if w[0].abs() < 1e-12 {
        w.iter().sum::<f64>() < 0.0
    } else {
        w[0] < 0.0
    };
    if flip {
        w.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(w)
}

/// `w_0 s + sum_k w_k r_k`.
pub fn fuse_maxvariance(singleton: &[f64], order: &OrderStats, w: &[f64]) -> Result<Vec<f64>> {
    if w.len() != order.m + 1 {
        return Err(SparcError::LengthMismatch {
            expected: order.m + 1,
            found: w.len(),
        });
    }
    if singleton.len() != order.rows {
        return Err(SparcError::LengthMismatch {
            expected: order.rows,
            found: singleton.len(),
        });
    }
    Ok((0..order.rows)
        .map(|t| {
            w[0] * singleton[t]
                + order
                    .row(t)
                    .iter()
                    .zip(&w[1..])
                    .map(|(r, wk)| r * wk)
                    .sum::<f64>()
        })
        .collect())
}

/// The `k`-th largest compound score.
pub fn fuse_kmax(order: &OrderStats, k: usize) -> Result<Vec<f64>> {
    order.rank(k)
}

/// Mean of the order statistics from rank `k` down to the last.
pub fn fuse_mean_geq_k(order: &OrderStats, k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > order.m {
        return Err(SparcError::RankOutOfRange {
            rank: k,
            max: order.m,
        });
    }
    let count = (order.m - k + 1) as f64;
    Ok((0..order.rows)
        .map(|t| order.row(t)[k - 1..].iter().sum::<f64>() / count)
        .collect())
}

/// Add the fused compound signal onto the singleton score.
pub fn merge(singleton: &[f64], fused: &[f64]) -> Result<Vec<f64>> {
    if singleton.len() != fused.len() {
        return Err(SparcError::LengthMismatch {
            expected: singleton.len(),
            found: fused.len(),
        });
    }
    Ok(singleton.iter().zip(fused).map(|(s, z)| s + z).collect())
}

/// How compound order statistics are collapsed per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    MaxVariance,
    KMax(usize),
    MeanGeq(usize),
    Singleton,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::MaxVariance => f.write_str("maxvariance"),
            Strategy::KMax(k) => write!(f, "kmax:{k}"),
            Strategy::MeanGeq(k) => write!(f, "meangeq:{k}"),
            Strategy::Singleton => f.write_str("singleton"),
        }
    }
}

impl FromStr for Strategy {
    type Err = SparcError;

    fn from_str(s: &str) -> Result<Self> {
        let rank = |v: &str| -> Result<usize> {
            match v.parse::<usize>() {
                Ok(k) if k >= 1 => Ok(k),
                _ => Err(SparcError::invalid(format!(
                    "bad rank {v:?} in strategy {s:?}"
                ))),
            }
        };
        match s.split_once(':') {
            None if s == "maxvariance" => Ok(Strategy::MaxVariance),
            None if s == "singleton" => Ok(Strategy::Singleton),
            Some(("kmax", k)) => Ok(Strategy::KMax(rank(k)?)),
            Some(("meangeq", k)) => Ok(Strategy::MeanGeq(rank(k)?)),
            _ => Err(SparcError::invalid(format!(
                "unknown strategy {s:?} (expected maxvariance | kmax:<k> | meangeq:<K> | singleton)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub strategy: Strategy,
    /// Add the fused signal onto the debiased singleton score.
    pub merge: bool,
    /// Fall back to the singleton direction on a zero covariance.
    pub permissive: bool,
    /// Use the last available rank when a class has fewer than `k` prompts.
    pub clamp_rank: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::MaxVariance,
            merge: true,
            permissive: false,
            clamp_rank: false,
        }
    }
}

impl FusionConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassFusion {
    pub class: usize,
    /// Compound prompts mentioning the class.
    pub m: usize,
    /// Max-variance weights over `[s_i, r_{i,1}, ..., r_{i,m}]`.
    pub weights: Option<Vec<f64>>,
    /// No compound prompt mentions the class; the singleton score is used as is.
    pub passthrough: bool,
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    /// `M x N` refined scores, one column per class.
    pub refined: ScoreMatrix,
    pub classes: Vec<ClassFusion>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub refined: ScoreMatrix,
    pub classes: Vec<ClassFusion>,
    pub debiased_singleton: ScoreMatrix,
    pub stats: DebiasStats,
}

fn fuse_class(
    class: usize,
    singleton: &[f64],
    compound: &ScoreMatrix,
    cols: &[usize],
    cfg: &FusionConfig,
) -> Result<(Vec<f64>, ClassFusion)> {
    let passthrough = |m| ClassFusion {
        class,
        m,
        weights: None,
        passthrough: m == 0,
    };
    if cfg.strategy == Strategy::Singleton {
        return Ok((singleton.to_vec(), passthrough(cols.len())));
    }
    if cols.is_empty() {
        log::warn!("class {class} has no compound prompts; passing the singleton score through");
        return Ok((singleton.to_vec(), passthrough(0)));
    }
    let order = order_statistics_for_columns(compound, cols, class)?;
    let clamp = |k: usize| if cfg.clamp_rank { k.min(order.m()) } else { k };
    let mut info = passthrough(order.m());
    let fused = match cfg.strategy {
        Strategy::KMax(k) => fuse_kmax(&order, clamp(k))?,
        Strategy::MeanGeq(k) => fuse_mean_geq_k(&order, clamp(k))?,
        Strategy::MaxVariance => {
            let ranks: Vec<Vec<f64>> = (1..=order.m())
                .map(|k| order.rank(k))
                .collect::<Result<_>>()?;
            let mut columns: Vec<&[f64]> = vec![singleton];
            columns.extend(ranks.iter().map(Vec::as_slice));
            let w = max_variance_weights(&columns, cfg.permissive)?;
            let fused = fuse_maxvariance(singleton, &order, &w)?;
            info.weights = Some(w);
            fused
        }
        Strategy::Singleton => unreachable!(),
    };
    let out = if cfg.merge {
        merge(singleton, &fused)?
    } else {
        fused
    };
    Ok((out, info))
}

/// Fuse already debiased singleton (`M x N`) and compound (`M x P`) scores.
pub fn fuse_debiased(
    singleton: &ScoreMatrix,
    compound: &ScoreMatrix,
    prompts: &[PromptSpec],
    cfg: &FusionConfig,
) -> Result<FusionOutput> {
    if singleton.image_ids != compound.image_ids {
        return Err(SparcError::invalid(
            "singleton and compound scores must share image ids",
        ));
    }
    let n = singleton.cols();
    let by_id: HashMap<u32, &PromptSpec> = prompts.iter().map(|p| (p.id, p)).collect();
    let mut class_cols: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (c, id) in compound.prompt_ids.iter().enumerate() {
        let p = by_id.get(id).ok_or_else(|| {
            SparcError::invalid(format!("compound column {c} has unknown prompt id {id}"))
        })?;
        for &class in &p.class_set {
            if class < n {
                class_cols[class].push(c);
            }
        }
    }
    let per_class: Vec<(Vec<f64>, ClassFusion)> = (0..n)
        .into_par_iter()
        .map(|i| fuse_class(i, &singleton.column(i), compound, &class_cols[i], cfg))
        .collect::<Result<_>>()?;
    let refined = ScoreMatrix::from_fn(
        singleton.image_ids.clone(),
        singleton.prompt_ids.clone(),
        |t, i| per_class[i].0[t],
    )
    .with_stage(ScoreStage::Refined);
    Ok(FusionOutput {
        refined,
        classes: per_class.into_iter().map(|(_, info)| info).collect(),
    })
}

/// Debias, compute order statistics, fuse and merge.
pub fn sparc_pipeline(bundle: &ScoreBundle, cfg: &FusionConfig) -> Result<PipelineOutput> {
    let debiased = debias_bundle(bundle)?;
    let fused = fuse_debiased(
        &debiased.singleton,
        &debiased.compound,
        &bundle.prompts,
        cfg,
    )?;
    Ok(PipelineOutput {
        refined: fused.refined,
        classes: fused.classes,
        debiased_singleton: debiased.singleton,
        stats: debiased.stats,
    })
}
