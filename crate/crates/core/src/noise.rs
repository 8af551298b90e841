//! Compound-score noise models.
//!
//! A compound prompt over classes `C` scores image `t` as
//! `theta1_t * f(y_C) + theta0_t + eps`, where each class contributes one of
//! two values, `u_i` when absent and `v_i` when present. The families differ
//! in how `f` combines those values: AND (min), OR (max), additive (sum),
//! OR with an AND bonus (`max + delta * others`), a lookup table per prompt,
//! or a single constant.
//!
//! Every family predicts one value per (prompt, label pattern) cell, so fits
//! run on per-cell sufficient statistics rather than raw observations.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::debias::debias_bundle;
use crate::error::{Result, SparcError};
use crate::model::{LabelMatrix, PromptSpec, ScoreBundle, ScoreMatrix};
use crate::rng::{domain, Stream};

/// Largest class set a prompt may mention.
pub const MAX_SET: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NoiseFamily {
    Constant,
    OnlyAnd,
    OnlyOr,
    Additive,
    OrStaticBonus,
    OrVariableBonus,
    Lut,
}

impl NoiseFamily {
    pub const ALL: [NoiseFamily; 7] = [
        NoiseFamily::Constant,
        NoiseFamily::OnlyAnd,
        NoiseFamily::OnlyOr,
        NoiseFamily::Additive,
        NoiseFamily::OrStaticBonus,
        NoiseFamily::OrVariableBonus,
        NoiseFamily::Lut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseFamily::Constant => "constant",
            NoiseFamily::OnlyAnd => "only_and",
            NoiseFamily::OnlyOr => "only_or",
            NoiseFamily::Additive => "additive",
            NoiseFamily::OrStaticBonus => "or_static_bonus",
            NoiseFamily::OrVariableBonus => "or_variable_bonus",
            NoiseFamily::Lut => "lut",
        }
    }
}

impl fmt::Display for NoiseFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseFamily {
    type Err = SparcError;

    fn from_str(s: &str) -> Result<Self> {
        NoiseFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| SparcError::invalid(format!("unknown noise family {s:?}")))
    }
}

fn argmax(vals: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in vals.iter().enumerate().skip(1) {
        if *v > vals[best] {
            best = k;
        }
    }
    best
}

fn argmin(vals: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in vals.iter().enumerate().skip(1) {
        if *v < vals[best] {
            best = k;
        }
    }
    best
}

/// `f` for a class-value family given the per-class values of one cell.
fn combine(family: NoiseFamily, vals: &[f64], delta: f64) -> f64 {
    match family {
        NoiseFamily::OnlyOr => vals[argmax(vals)],
        NoiseFamily::OnlyAnd => vals[argmin(vals)],
        NoiseFamily::Additive => vals.iter().sum(),
        NoiseFamily::OrStaticBonus | NoiseFamily::OrVariableBonus => {
            let top = argmax(vals);
            let others: f64 = vals
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != top)
                .map(|(_, v)| v)
                .sum();
            vals[top] + delta * others
        }
        NoiseFamily::Constant | NoiseFamily::Lut => unreachable!("not a class-value family"),
    }
}

/// Coefficients `c_k` with `f = sum_k c_k vals_k` on the current max/min pattern.
fn coefficients(family: NoiseFamily, vals: &[f64], delta: f64, out: &mut [f64]) {
    let out = &mut out[..vals.len()];
    match family {
        NoiseFamily::OnlyOr => {
            out.fill(0.0);
            out[argmax(vals)] = 1.0;
        }
        NoiseFamily::OnlyAnd => {
            out.fill(0.0);
            out[argmin(vals)] = 1.0;
        }
        NoiseFamily::Additive => out.fill(1.0),
        NoiseFamily::OrStaticBonus | NoiseFamily::OrVariableBonus => {
            out.fill(delta);
            out[argmax(vals)] = 1.0;
        }
        NoiseFamily::Constant | NoiseFamily::Lut => unreachable!("not a class-value family"),
    }
}

/// Index of a label pattern: the first class of the set is the most
/// significant bit, so a pair `(y_i, y_j)` maps to `2 y_i + y_j`.
pub fn cell_index(labels: &[u8]) -> usize {
    labels
        .iter()
        .fold(0, |acc, &y| (acc << 1) | usize::from(y != 0))
}

fn label_at(bits: usize, len: usize, k: usize) -> usize {
    (bits >> (len - 1 - k)) & 1
}

/// Fitted or generating parameters of one family.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub family: NoiseFamily,
    /// Constant family only.
    pub constant: Option<f64>,
    /// Per-class value when absent.
    pub u: Vec<f64>,
    /// Per-class value when present.
    pub v: Vec<f64>,
    /// Static bonus.
    pub delta: Option<f64>,
    /// Class sets that per-prompt parameters refer to.
    pub sets: Vec<Vec<usize>>,
    /// Per-prompt bonus, aligned with `sets`.
    pub set_delta: Vec<f64>,
    /// Per-prompt table of `2^|set|` values indexed by [`cell_index`].
    pub lut: Vec<Vec<f64>>,
}

impl NoiseModel {
    fn empty(family: NoiseFamily) -> Self {
        Self {
            family,
            constant: None,
            u: Vec::new(),
            v: Vec::new(),
            delta: None,
            sets: Vec::new(),
            set_delta: Vec::new(),
            lut: Vec::new(),
        }
    }

    pub fn constant(c: f64) -> Self {
        Self {
            constant: Some(c),
            ..Self::empty(NoiseFamily::Constant)
        }
    }

    /// `only_and`, `only_or` or `additive`.
    pub fn class_values(family: NoiseFamily, u: Vec<f64>, v: Vec<f64>) -> Self {
        Self {
            u,
            v,
            ..Self::empty(family)
        }
    }

    pub fn static_bonus(u: Vec<f64>, v: Vec<f64>, delta: f64) -> Self {
        Self {
            u,
            v,
            delta: Some(delta),
            ..Self::empty(NoiseFamily::OrStaticBonus)
        }
    }

    pub fn variable_bonus(
        u: Vec<f64>,
        v: Vec<f64>,
        sets: Vec<Vec<usize>>,
        set_delta: Vec<f64>,
    ) -> Self {
        Self {
            u,
            v,
            sets,
            set_delta,
            ..Self::empty(NoiseFamily::OrVariableBonus)
        }
    }

    pub fn lookup_table(sets: Vec<Vec<usize>>, lut: Vec<Vec<f64>>) -> Self {
        Self {
            sets,
            lut,
            ..Self::empty(NoiseFamily::Lut)
        }
    }

    fn set_position(&self, classes: &[usize]) -> Result<usize> {
        self.sets.iter().position(|s| s == classes).ok_or_else(|| {
            SparcError::MissingParameter(format!(
                "{} has no entry for class set {classes:?}",
                self.family
            ))
        })
    }

    /// Noiseless `f` for a prompt over `classes` (sorted) with the given labels.
    pub fn predict(&self, classes: &[usize], labels: &[u8]) -> Result<f64> {
        if classes.len() != labels.len() || classes.is_empty() || classes.len() > MAX_SET {
            return Err(SparcError::invalid(format!(
                "need 1..={MAX_SET} classes with one label each, got {} classes and {} labels",
                classes.len(),
                labels.len()
            )));
        }
        match self.family {
            NoiseFamily::Constant => self
                .constant
                .ok_or_else(|| SparcError::MissingParameter("constant".into())),
            NoiseFamily::Lut => {
                let p = self.set_position(classes)?;
                self.lut
                    .get(p)
                    .and_then(|t| t.get(cell_index(labels)))
                    .copied()
                    .ok_or_else(|| {
                        SparcError::MissingParameter(format!("lut entry for {classes:?}"))
                    })
            }
            family => {
                let mut vals = [0.0; MAX_SET];
                for (k, (&c, &y)) in classes.iter().zip(labels).enumerate() {
                    let table = if y != 0 { &self.v } else { &self.u };
                    vals[k] = *table.get(c).ok_or_else(|| {
                        SparcError::MissingParameter(format!(
                            "{} value for class {c}",
                            if y != 0 { "v" } else { "u" }
                        ))
                    })?;
                }
                let delta = match family {
                    NoiseFamily::OrStaticBonus => self
                        .delta
                        .ok_or_else(|| SparcError::MissingParameter("delta".into()))?,
                    NoiseFamily::OrVariableBonus => {
                        let p = self.set_position(classes)?;
                        *self.set_delta.get(p).ok_or_else(|| {
                            SparcError::MissingParameter(format!("delta for {classes:?}"))
                        })?
                    }
                    _ => 0.0,
                };
                Ok(combine(family, &vals[..classes.len()], delta))
            }
        }
    }
}

/// `f(y_i, y_j)` for one pair.
pub fn predict_f(model: &NoiseModel, pair: (usize, usize), labels: (u8, u8)) -> Result<f64> {
    model.predict(&[pair.0, pair.1], &[labels.0, labels.1])
}

/// One compound score with the labels of its two classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairObservation {
    pub image: usize,
    pub i: usize,
    pub j: usize,
    pub score: f64,
    pub y_i: u8,
    pub y_j: u8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    /// Index into [`CellTable::sets`].
    pub set: usize,
    /// Label pattern, see [`cell_index`].
    pub bits: usize,
    pub n: f64,
    pub mean: f64,
    /// Sum of squared deviations from `mean`.
    pub within_ss: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }
}

/// Sufficient statistics of compound scores per (prompt, label pattern).
#[derive(Debug, Clone, PartialEq)]
pub struct CellTable {
    pub num_classes: usize,
    pub sets: Vec<Vec<usize>>,
    pub cells: Vec<Cell>,
    pub count: f64,
    pub mean: f64,
    pub ss_tot: f64,
}

/// Which compound matrix a bundle fit reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreSource {
    /// Scores as stored; appropriate when `theta` is constant across images.
    Raw,
    /// Image- and prompt-level standardized scores.
    #[default]
    Debiased,
}

impl FromStr for ScoreSource {
    type Err = SparcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(ScoreSource::Raw),
            "debiased" => Ok(ScoreSource::Debiased),
            _ => Err(SparcError::invalid(format!(
                "unknown score source {s:?} (raw | debiased)"
            ))),
        }
    }
}

impl CellTable {
    fn build(
        num_classes: usize,
        sets: Vec<Vec<usize>>,
        samples: impl Iterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        for s in &sets {
            if s.is_empty() || s.len() > MAX_SET || s.iter().any(|&c| c >= num_classes) {
                return Err(SparcError::invalid(format!(
                    "class set {s:?} must hold 1..={MAX_SET} classes below {num_classes}"
                )));
            }
        }
        let mut acc: BTreeMap<(usize, usize), Welford> = BTreeMap::new();
        let mut total = Welford::default();
        for (set, bits, score) in samples {
            if !score.is_finite() {
                return Err(SparcError::invalid("scores must be finite"));
            }
            acc.entry((set, bits)).or_default().push(score);
            total.push(score);
        }
        let cells = acc
            .into_iter()
            .map(|((set, bits), w)| Cell {
                set,
                bits,
                n: w.n,
                mean: w.mean,
                within_ss: w.m2,
            })
            .collect();
        Ok(Self {
            num_classes,
            sets,
            cells,
            count: total.n,
            mean: total.mean,
            ss_tot: total.m2,
        })
    }

    /// Group pair observations; each distinct `(i, j)` becomes one prompt.
    pub fn from_observations(num_classes: usize, obs: &[PairObservation]) -> Result<Self> {
        let mut index: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for o in obs {
            if o.i >= o.j {
                return Err(SparcError::invalid(format!(
                    "pair ({}, {}) must have i < j",
                    o.i, o.j
                )));
            }
            if o.y_i > 1 || o.y_j > 1 {
                return Err(SparcError::invalid("labels must be 0 or 1"));
            }
            let next = index.len();
            index.entry((o.i, o.j)).or_insert(next);
        }
        let mut sets = vec![Vec::new(); index.len()];
        for (&(i, j), &p) in &index {
            sets[p] = vec![i, j];
        }
        let samples = obs
            .iter()
            .map(|o| (index[&(o.i, o.j)], cell_index(&[o.y_i, o.y_j]), o.score));
        Self::build(num_classes, sets, samples)
    }

    /// One prompt per score column; `class_sets[c]` lists the classes of column `c`.
    pub fn from_scores(
        scores: &ScoreMatrix,
        class_sets: &[Vec<usize>],
        labels: &LabelMatrix,
    ) -> Result<Self> {
        if class_sets.len() != scores.cols() {
            return Err(SparcError::LengthMismatch {
                expected: scores.cols(),
                found: class_sets.len(),
            });
        }
        if labels.image_ids != scores.image_ids {
            return Err(SparcError::invalid(
                "labels and scores must share image ids",
            ));
        }
        let num_classes = labels.cols();
        for s in class_sets {
            if s.iter().any(|&c| c >= num_classes) {
                return Err(SparcError::invalid(format!(
                    "class set {s:?} exceeds {num_classes} classes"
                )));
            }
        }
        let samples = (0..scores.rows()).flat_map(|t| {
            class_sets.iter().enumerate().map(move |(c, set)| {
                let bits = set.iter().fold(0, |acc, &k| {
                    (acc << 1) | usize::from(labels.is_present(t, k))
                });
                (c, bits, scores.get(t, c))
            })
        });
        Self::build(num_classes, class_sets.to_vec(), samples)
    }

    /// Compound scores of a labeled bundle.
    pub fn from_bundle(bundle: &ScoreBundle, source: ScoreSource) -> Result<Self> {
        let labels = bundle
            .labels
            .as_ref()
            .ok_or_else(|| SparcError::invalid("fitting noise models needs a labeled bundle"))?;
        let debiased;
        let scores = match source {
            ScoreSource::Raw => &bundle.compound,
            ScoreSource::Debiased => {
                debiased = debias_bundle(bundle)?;
                &debiased.compound
            }
        };
        let class_sets = bundle
            .compound
            .prompt_ids
            .iter()
            .map(|&id| {
                bundle
                    .prompt(id)
                    .map(|p| p.class_set.clone())
                    .ok_or_else(|| SparcError::invalid(format!("unknown compound prompt {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_scores(scores, &class_sets, labels)
    }

    fn param(&self, class: usize, present: usize) -> usize {
        present * self.num_classes + class
    }
}

/// Result of fitting one family.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModelFit {
    pub model: NoiseModel,
    pub fvu: f64,
    pub sweeps: usize,
    /// False when the sweep budget ran out first.
    pub converged: bool,
    /// LUT cells without observations, as `(set, cell index)`; they take the
    /// prompt's overall mean.
    pub empty_cells: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_sweeps: usize,
    /// Stop when a sweep improves the objective by less than this fraction.
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 200,
            tolerance: 1e-10,
        }
    }
}

/// Parameters of a class-value family during fitting.
#[derive(Debug, Clone)]
struct State {
    theta: Vec<f64>,
    /// Per-prompt bonus (all equal for the static family).
    deltas: Vec<f64>,
    obj: f64,
}

struct Fitter<'a> {
    table: &'a CellTable,
    family: NoiseFamily,
    /// `(cell, position)` pairs touching each parameter.
    param_cells: Vec<Vec<(usize, usize)>>,
}

impl<'a> Fitter<'a> {
    fn new(table: &'a CellTable, family: NoiseFamily) -> Self {
        let mut param_cells = vec![Vec::new(); 2 * table.num_classes];
        for (ci, cell) in table.cells.iter().enumerate() {
            let set = &table.sets[cell.set];
            for (k, &class) in set.iter().enumerate() {
                param_cells[table.param(class, label_at(cell.bits, set.len(), k))].push((ci, k));
            }
        }
        Self {
            table,
            family,
            param_cells,
        }
    }

    fn vals(&self, cell: &Cell, theta: &[f64], out: &mut [f64; MAX_SET]) -> usize {
        let set = &self.table.sets[cell.set];
        for (k, &class) in set.iter().enumerate() {
            out[k] = theta[self.table.param(class, label_at(cell.bits, set.len(), k))];
        }
        set.len()
    }

    fn predict(&self, cell: &Cell, theta: &[f64], deltas: &[f64]) -> f64 {
        let mut vals = [0.0; MAX_SET];
        let len = self.vals(cell, theta, &mut vals);
        combine(self.family, &vals[..len], deltas[cell.set])
    }

    /// `sum_c n_c (f_c - mean_c)^2`; the within-cell part is constant.
    fn objective(&self, theta: &[f64], deltas: &[f64]) -> f64 {
        self.table
            .cells
            .iter()
            .map(|c| c.n * (self.predict(c, theta, deltas) - c.mean).powi(2))
            .sum()
    }

    fn state(&self, theta: Vec<f64>, deltas: Vec<f64>) -> State {
        let obj = self.objective(&theta, &deltas);
        State { theta, deltas, obj }
    }

    /// Exact least-squares bonus given the class values.
    fn update_deltas(&self, s: &mut State) {
        let nsets = self.table.sets.len();
        let (mut num, mut den) = (vec![0.0; nsets], vec![0.0; nsets]);
        let mut vals = [0.0; MAX_SET];
        for cell in &self.table.cells {
            let len = self.vals(cell, &s.theta, &mut vals);
            let top = argmax(&vals[..len]);
            let others: f64 = (0..len).filter(|&k| k != top).map(|k| vals[k]).sum();
            num[cell.set] += cell.n * others * (cell.mean - vals[top]);
            den[cell.set] += cell.n * others * others;
        }
        match self.family {
            NoiseFamily::OrStaticBonus => {
                let (n, d): (f64, f64) = (num.iter().sum(), den.iter().sum());
                if d > 0.0 {
                    s.deltas.fill(n / d);
                }
            }
            NoiseFamily::OrVariableBonus => {
                for p in 0..nsets {
                    if den[p] > 0.0 {
                        s.deltas[p] = num[p] / den[p];
                    }
                }
            }
            _ => return,
        }
        s.obj = self.objective(&s.theta, &s.deltas);
    }

    /// Exact minimization over one parameter: the objective is piecewise
    /// quadratic with breakpoints at the other values sharing a cell.
    fn update_coordinate(&self, s: &mut State, p: usize) {
        let cells = &self.param_cells[p];
        if cells.is_empty() {
            return;
        }
        let mut theta = s.theta.clone();
        let mut vals = [0.0; MAX_SET];
        let mut breaks = Vec::new();
        for &(ci, k) in cells {
            let len = self.vals(&self.table.cells[ci], &theta, &mut vals);
            breaks.extend((0..len).filter(|&o| o != k).map(|o| vals[o]));
        }
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
        let local = |theta: &[f64]| -> f64 {
            cells
                .iter()
                .map(|&(ci, _)| {
                    let c = &self.table.cells[ci];
                    c.n * (self.predict(c, theta, &s.deltas) - c.mean).powi(2)
                })
                .sum()
        };
        let current = local(&theta);
        let mut best = (current, s.theta[p]);
        let mut intervals = Vec::with_capacity(breaks.len() + 1);
        match (breaks.first(), breaks.last()) {
            (Some(&lo), Some(&hi)) => {
                intervals.push((f64::NEG_INFINITY, lo));
                intervals.extend(breaks.windows(2).map(|w| (w[0], w[1])));
                intervals.push((hi, f64::INFINITY));
            }
            _ => intervals.push((f64::NEG_INFINITY, f64::INFINITY)),
        }
        for (lo, hi) in intervals {
            let (x1, x2) = match (lo.is_finite(), hi.is_finite()) {
                (true, true) => (lo, hi),
                (true, false) => (lo, lo + 1.0),
                (false, true) => (hi - 1.0, hi),
                (false, false) => (0.0, 1.0),
            };
            let (mut a, mut b) = (0.0, 0.0);
            for &(ci, _) in cells {
                let c = &self.table.cells[ci];
                theta[p] = x1;
                let f1 = self.predict(c, &theta, &s.deltas);
                theta[p] = x2;
                let f2 = self.predict(c, &theta, &s.deltas);
                let slope = (f2 - f1) / (x2 - x1);
                let intercept = f1 - slope * x1;
                a += c.n * slope * slope;
                b += c.n * slope * (c.mean - intercept);
            }
            if a <= 0.0 {
                continue;
            }
            let x = (b / a).clamp(lo, hi);
            theta[p] = x;
            let value = local(&theta);
            if value < best.0 {
                best = (value, x);
            }
        }
        if best.0 < current {
            s.theta[p] = best.1;
            s.obj = self.objective(&s.theta, &s.deltas);
        }
    }

    /// Gauss-Newton step on the current max/min pattern, jointly in the class
    /// values and bonuses, with backtracking on the true objective.
    fn pattern_step(&self, s: &mut State) -> bool {
        let table = self.table;
        let np = 2 * table.num_classes;
        let delta_cols = match self.family {
            NoiseFamily::OrStaticBonus => 1,
            NoiseFamily::OrVariableBonus => table.sets.len(),
            _ => 0,
        };
        let mut x = DMatrix::<f64>::zeros(table.cells.len(), np + delta_cols);
        let mut r = DVector::<f64>::zeros(table.cells.len());
        let mut vals = [0.0; MAX_SET];
        let mut coef = [0.0; MAX_SET];
        for (row, cell) in table.cells.iter().enumerate() {
            let set = &table.sets[cell.set];
            let len = self.vals(cell, &s.theta, &mut vals);
            let delta = s.deltas[cell.set];
            coefficients(self.family, &vals[..len], delta, &mut coef);
            let w = cell.n.sqrt();
            for (k, &class) in set.iter().enumerate() {
                x[(row, table.param(class, label_at(cell.bits, len, k)))] += w * coef[k];
            }
            if delta_cols > 0 {
                let top = argmax(&vals[..len]);
                let others: f64 = (0..len).filter(|&k| k != top).map(|k| vals[k]).sum();
                let col = if delta_cols == 1 { np } else { np + cell.set };
                x[(row, col)] = w * others;
            }
            r[row] = w * (cell.mean - combine(self.family, &vals[..len], delta));
        }
        let svd = x.svd(true, true);
        let eps = 1e-12 * svd.singular_values.max();
        let Ok(step) = svd.solve(&r, eps) else {
            return false;
        };
        let mut t = 1.0;
        for _ in 0..40 {
            let theta: Vec<f64> = s
                .theta
                .iter()
                .enumerate()
                .map(|(i, v)| v + t * step[i])
                .collect();
            let deltas: Vec<f64> = match delta_cols {
                0 => s.deltas.clone(),
                1 => vec![s.deltas[0] + t * step[np]; s.deltas.len()],
                _ => s
                    .deltas
                    .iter()
                    .enumerate()
                    .map(|(p, d)| d + t * step[np + p])
                    .collect(),
            };
            let obj = self.objective(&theta, &deltas);
            if obj < s.obj {
                *s = State { theta, deltas, obj };
                return true;
            }
            t *= 0.5;
        }
        false
    }

    fn descend(&self, mut s: State, opts: &FitOptions) -> (State, usize, bool) {
        if self.family == NoiseFamily::Additive {
            self.pattern_step(&mut s);
            return (s, 1, true);
        }
        for sweep in 1..=opts.max_sweeps {
            let prev = s.obj;
            if prev <= 0.0 {
                return (s, sweep - 1, true);
            }
            self.update_deltas(&mut s);
            for p in 0..self.param_cells.len() {
                self.update_coordinate(&mut s, p);
            }
            self.pattern_step(&mut s);
            if prev - s.obj <= opts.tolerance * prev {
                return (s, sweep, true);
            }
        }
        (s, opts.max_sweeps, false)
    }
}

fn fvu_from_objective(table: &CellTable, obj: f64) -> f64 {
    let within: f64 = table.cells.iter().map(|c| c.within_ss).sum();
    (within + obj) / table.ss_tot
}

fn fit_class_values(
    table: &CellTable,
    family: NoiseFamily,
    opts: &FitOptions,
) -> (State, usize, bool) {
    let nsets = table.sets.len();
    let np = 2 * table.num_classes;
    let additive = {
        let f = Fitter::new(table, NoiseFamily::Additive);
        f.descend(f.state(vec![0.0; np], vec![0.0; nsets]), opts)
            .0
            .theta
    };
    let constant = vec![table.mean; np];
    let best_of = |fitter: &Fitter, starts: Vec<State>| {
        starts
            .into_iter()
            .map(|s| fitter.descend(s, opts))
            .min_by(|a, b| a.0.obj.total_cmp(&b.0.obj))
            .expect("at least one start")
    };
    let fitter = Fitter::new(table, family);
    match family {
        NoiseFamily::Additive => {
            let s = fitter.state(additive, vec![0.0; nsets]);
            (s, 1, true)
        }
        NoiseFamily::OnlyOr | NoiseFamily::OnlyAnd => best_of(
            &fitter,
            vec![
                fitter.state(additive, vec![0.0; nsets]),
                fitter.state(constant, vec![0.0; nsets]),
            ],
        ),
        NoiseFamily::OrStaticBonus => {
            // the OR optimum with no bonus is feasible here, so the fit can only improve on it
            let (or_fit, _, _) = fit_class_values(table, NoiseFamily::OnlyOr, opts);
            best_of(
                &fitter,
                vec![
                    fitter.state(additive, vec![0.5; nsets]),
                    fitter.state(or_fit.theta, vec![0.0; nsets]),
                ],
            )
        }
        NoiseFamily::OrVariableBonus => {
            let (static_fit, _, _) = fit_class_values(table, NoiseFamily::OrStaticBonus, opts);
            best_of(
                &fitter,
                vec![fitter.state(static_fit.theta, static_fit.deltas)],
            )
        }
        NoiseFamily::Constant | NoiseFamily::Lut => unreachable!(),
    }
}

/// Least-squares fit of one family to the cell statistics.
pub fn fit_noise_model(table: &CellTable, family: NoiseFamily) -> Result<NoiseModelFit> {
    fit_noise_model_with(table, family, &FitOptions::default())
}

pub fn fit_noise_model_with(
    table: &CellTable,
    family: NoiseFamily,
    opts: &FitOptions,
) -> Result<NoiseModelFit> {
    if table.count < 2.0 {
        return Err(SparcError::invalid("need at least 2 observations"));
    }
    if !(table.ss_tot > 0.0) {
        return Err(SparcError::ZeroVariance);
    }
    let mut fit = NoiseModelFit {
        model: NoiseModel::empty(family),
        fvu: 1.0,
        sweeps: 0,
        converged: true,
        empty_cells: Vec::new(),
    };
    match family {
        NoiseFamily::Constant => {
            fit.model = NoiseModel::constant(table.mean);
            let obj: f64 = table
                .cells
                .iter()
                .map(|c| c.n * (c.mean - table.mean).powi(2))
                .sum();
            fit.fvu = fvu_from_objective(table, obj);
        }
        NoiseFamily::Lut => {
            let mut sum = vec![(0.0, 0.0); table.sets.len()];
            for c in &table.cells {
                sum[c.set].0 += c.n * c.mean;
                sum[c.set].1 += c.n;
            }
            let mut lut: Vec<Vec<f64>> = table
                .sets
                .iter()
                .zip(&sum)
                .map(|(s, &(total, n))| {
                    vec![if n > 0.0 { total / n } else { table.mean }; 1 << s.len()]
                })
                .collect();
            let mut seen: Vec<Vec<bool>> = table
                .sets
                .iter()
                .map(|s| vec![false; 1 << s.len()])
                .collect();
            for c in &table.cells {
                lut[c.set][c.bits] = c.mean;
                seen[c.set][c.bits] = true;
            }
            for (p, flags) in seen.iter().enumerate() {
                for (bits, &ok) in flags.iter().enumerate() {
                    if !ok {
                        log::warn!(
                            "lut cell {bits} of class set {:?} has no observations",
                            table.sets[p]
                        );
                        fit.empty_cells.push((p, bits));
                    }
                }
            }
            fit.model = NoiseModel::lookup_table(table.sets.clone(), lut);
            fit.fvu = fvu_from_objective(table, 0.0);
        }
        family => {
            let (state, sweeps, converged) = fit_class_values(table, family, opts);
            if !converged {
                log::warn!("{family} fit stopped after {sweeps} sweeps without converging");
            }
            let n = table.num_classes;
            let (u, v) = (state.theta[..n].to_vec(), state.theta[n..].to_vec());
            fit.model = match family {
                NoiseFamily::OrStaticBonus => {
                    NoiseModel::static_bonus(u, v, state.deltas.first().copied().unwrap_or(0.0))
                }
                NoiseFamily::OrVariableBonus => {
                    NoiseModel::variable_bonus(u, v, table.sets.clone(), state.deltas.clone())
                }
                _ => NoiseModel::class_values(family, u, v),
            };
            fit.fvu = fvu_from_objective(table, state.obj);
            fit.sweeps = sweeps;
            fit.converged = converged;
        }
    }
    Ok(fit)
}

/// Fit every family, in the order of [`NoiseFamily::ALL`].
pub fn fit_all_families(table: &CellTable) -> Result<Vec<NoiseModelFit>> {
    NoiseFamily::ALL
        .par_iter()
        .map(|&f| fit_noise_model(table, f))
        .collect()
}

/// `SS_res / SS_tot`.
pub fn compute_fvu(predictions: &[f64], scores: &[f64]) -> Result<f64> {
    if predictions.len() != scores.len() {
        return Err(SparcError::LengthMismatch {
            expected: scores.len(),
            found: predictions.len(),
        });
    }
    if scores.len() < 2 {
        return Err(SparcError::invalid("FVU needs at least 2 scores"));
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let ss_tot: f64 = scores.iter().map(|s| (s - mean).powi(2)).sum();
    if !(ss_tot > 0.0) {
        return Err(SparcError::ZeroVariance);
    }
    let ss_res: f64 = predictions
        .iter()
        .zip(scores)
        .map(|(p, s)| (s - p).powi(2))
        .sum();
    Ok(ss_res / ss_tot)
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BonusStatistics {
    /// The static bonus, or the median of per-prompt bonuses.
    pub delta: f64,
    pub lower_quartile: Option<f64>,
    pub upper_quartile: Option<f64>,
}

pub fn bonus_statistics(model: &NoiseModel) -> Result<BonusStatistics> {
    match model.family {
        NoiseFamily::OrStaticBonus => Ok(BonusStatistics {
            delta: model
                .delta
                .ok_or_else(|| SparcError::MissingParameter("delta".into()))?,
            lower_quartile: None,
            upper_quartile: None,
        }),
        NoiseFamily::OrVariableBonus => {
            if model.set_delta.len() < 4 {
                return Err(SparcError::invalid(format!(
                    "quartiles need at least 4 prompts, got {}",
                    model.set_delta.len()
                )));
            }
            let mut d = model.set_delta.clone();
            d.sort_by(f64::total_cmp);
            Ok(BonusStatistics {
                delta: quantile_sorted(&d, 0.5),
                lower_quartile: Some(quantile_sorted(&d, 0.25)),
                upper_quartile: Some(quantile_sorted(&d, 0.75)),
            })
        }
        other => Err(SparcError::invalid(format!("{other} has no bonus"))),
    }
}

/// Fit report with one row per family.
pub fn fit_report_csv(fits: &[NoiseModelFit]) -> String {
    let mut out = String::from("family,fvu,delta,delta_q1,delta_q3,sweeps,converged\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for fit in fits {
        let stats = bonus_statistics(&fit.model).ok();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            fit.model.family,
            fit.fvu,
            opt(stats.map(|s| s.delta)),
            opt(stats.and_then(|s| s.lower_quartile)),
            opt(stats.and_then(|s| s.upper_quartile)),
            fit.sweeps,
            fit.converged
        ));
    }
    out
}

/// Generating process for compound scores.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseGenParams {
    pub model: NoiseModel,
    /// Per-image offset.
    pub theta0: Vec<f64>,
    /// Per-image positive scale.
    pub theta1: Vec<f64>,
    pub sigma: f64,
}

impl NoiseGenParams {
    /// Unit scale, zero offset.
    pub fn unbiased(model: NoiseModel, images: usize, sigma: f64) -> Self {
        Self {
            model,
            theta0: vec![0.0; images],
            theta1: vec![1.0; images],
            sigma,
        }
    }
}

/// `s = theta1_t f(y) + theta0_t + eps` for every image and prompt. Image `t`
/// draws its noise from its own stream, one normal per prompt in column order.
pub fn generate_scores(
    labels: &LabelMatrix,
    prompts: &[PromptSpec],
    params: &NoiseGenParams,
    seed: u64,
) -> Result<ScoreMatrix> {
    let rows = labels.rows();
    if params.theta0.len() != rows || params.theta1.len() != rows {
        return Err(SparcError::LengthMismatch {
            expected: rows,
            found: params.theta0.len().min(params.theta1.len()),
        });
    }
    if !(params.sigma >= 0.0 && params.sigma.is_finite()) {
        return Err(SparcError::invalid(format!(
            "sigma must be finite and >= 0, got {}",
            params.sigma
        )));
    }
    if params.theta1.iter().any(|t| !(*t > 0.0)) {
        return Err(SparcError::invalid("theta1 must be positive"));
    }
    for p in prompts {
        if p.class_set.iter().any(|&c| c >= labels.cols()) {
            return Err(SparcError::invalid(format!(
                "prompt {} mentions an unknown class",
                p.id
            )));
        }
    }
    let rows_out: Vec<Vec<f64>> = (0..rows)
        .into_par_iter()
        .map(|t| {
            let mut stream = Stream::for_domain(seed, domain::COMPOUND_NOISE, t as u64);
            let mut y = [0u8; MAX_SET];
            prompts
                .iter()
                .map(|p| {
                    for (k, &c) in p.class_set.iter().enumerate() {
                        y[k] = labels.get(t, c);
                    }
                    let f = params
                        .model
                        .predict(&p.class_set, &y[..p.class_set.len()])?;
                    let eps = params.sigma * stream.normal();
                    Ok(params.theta1[t] * f + params.theta0[t] + eps)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(ScoreMatrix::from_fn(
        labels.image_ids.clone(),
        prompts.iter().map(|p| p.id).collect(),
        |t, c| rows_out[t][c],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PromptKind;

    fn unit() -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; 3], vec![1.0; 3])
    }

    #[test]
    fn family_predictions() {
        let (u, v) = unit();
        let or = NoiseModel::class_values(NoiseFamily::OnlyOr, u.clone(), v.clone());
        assert_eq!(predict_f(&or, (0, 1), (0, 1)).unwrap(), 1.0);
        let and = NoiseModel::class_values(NoiseFamily::OnlyAnd, u.clone(), v.clone());
        assert_eq!(predict_f(&and, (0, 1), (0, 1)).unwrap(), 0.0);
        let add = NoiseModel::class_values(NoiseFamily::Additive, u.clone(), v.clone());
        assert_eq!(predict_f(&add, (0, 1), (1, 1)).unwrap(), 2.0);
        let bonus = NoiseModel::static_bonus(u.clone(), v.clone(), 0.5);
        assert_eq!(predict_f(&bonus, (0, 1), (1, 1)).unwrap(), 1.5);
        assert_eq!(bonus.predict(&[0, 1, 2], &[1, 1, 1]).unwrap(), 2.0);
        let lut = NoiseModel::lookup_table(vec![vec![0, 1]], vec![vec![0.1, 0.2, 0.3, 0.4]]);
        assert_eq!(predict_f(&lut, (0, 1), (1, 0)).unwrap(), 0.3);
        assert!(predict_f(&lut, (0, 2), (1, 0)).is_err());
        assert!(matches!(
            predict_f(
                &NoiseModel::empty(NoiseFamily::OrStaticBonus),
                (0, 1),
                (0, 0)
            ),
            Err(SparcError::MissingParameter(_))
        ));
    }

    #[test]
    fn zero_bonus_is_or() {
        let u = vec![0.3, -0.2, 0.1];
        let v = vec![0.9, 1.4, 0.2];
        let or = NoiseModel::class_values(NoiseFamily::OnlyOr, u.clone(), v.clone());
        let bonus = NoiseModel::static_bonus(u, v, 0.0);
        for bits in 0..4u8 {
            let y = (bits >> 1, bits & 1);
            assert_eq!(
                predict_f(&or, (0, 1), y).unwrap(),
                predict_f(&bonus, (0, 1), y).unwrap()
            );
        }
    }

    #[test]
    fn fvu_values() {
        assert_eq!(
            compute_fvu(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap(),
            0.0
        );
        assert_eq!(compute_fvu(&[1.0, 1.0], &[0.0, 2.0]).unwrap(), 1.0);
        assert_eq!(compute_fvu(&[0.0, 1.0], &[0.0, 2.0]).unwrap(), 0.5);
        assert!(matches!(
            compute_fvu(&[1.0, 1.0], &[1.0, 1.0]),
            Err(SparcError::ZeroVariance)
        ));
        assert!(compute_fvu(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn quartiles() {
        let m = NoiseModel::variable_bonus(
            vec![],
            vec![],
            vec![vec![0, 1]; 4],
            vec![0.4, 0.1, 0.3, 0.2],
        );
        let s = bonus_statistics(&m).unwrap();
        assert!((s.lower_quartile.unwrap() - 0.175).abs() < 1e-15);
        assert!((s.upper_quartile.unwrap() - 0.325).abs() < 1e-15);
        let m = NoiseModel::variable_bonus(vec![], vec![], vec![vec![0, 1]; 5], vec![0.5; 5]);
        let s = bonus_statistics(&m).unwrap();
        assert_eq!((s.lower_quartile, s.upper_quartile), (Some(0.5), Some(0.5)));
        let m = NoiseModel::variable_bonus(vec![], vec![], vec![vec![0, 1]; 3], vec![0.5; 3]);
        assert!(bonus_statistics(&m).is_err());
    }

    fn all_pairs(n: usize) -> Vec<PromptSpec> {
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                out.push(PromptSpec::new(
                    out.len() as u32,
                    format!("{i} and {j}"),
                    PromptKind::Compound,
                    &[i, j],
                ));
            }
        }
        out
    }

    fn random_labels(n: usize, m: usize, seed: u64) -> LabelMatrix {
        let mut s = Stream::new(seed, 0);
        let values = (0..n * m).map(|_| u8::from(s.bernoulli(0.4))).collect();
        LabelMatrix::new(values, (0..m).map(|t| format!("i{t}")).collect(), n).unwrap()
    }

    fn class_values(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut s = Stream::new(seed, 1);
        let u: Vec<f64> = (0..n).map(|_| s.uniform_range(-0.5, 0.0)).collect();
        let v = u.iter().map(|x| x + s.uniform_range(0.5, 1.5)).collect();
        (u, v)
    }

    fn table_for(model: NoiseModel, n: usize, m: usize, sigma: f64, seed: u64) -> CellTable {
        let labels = random_labels(n, m, seed);
        let prompts = all_pairs(n);
        let scores = generate_scores(
            &labels,
            &prompts,
            &NoiseGenParams::unbiased(model, m, sigma),
            seed,
        )
        .unwrap();
        let sets: Vec<Vec<usize>> = prompts.iter().map(|p| p.class_set.clone()).collect();
        CellTable::from_scores(&scores, &sets, &labels).unwrap()
    }

    #[test]
    fn lut_interpolates_cell_means() {
        let sets = vec![vec![0, 1], vec![0, 2], vec![1, 2]];
        let lut = vec![
            vec![0.1, 0.5, -0.3, 0.9],
            vec![0.0, 0.2, 0.4, 0.6],
            vec![1.0, -1.0, 0.5, 0.25],
        ];
        let model = NoiseModel::lookup_table(sets, lut.clone());
        let t = table_for(model, 3, 400, 0.0, 5);
        let fit = fit_noise_model(&t, NoiseFamily::Lut).unwrap();
        assert!(fit.fvu.abs() < 1e-12);
        assert!(fit.empty_cells.is_empty());
        assert_eq!(fit.model.lut, lut);
    }

    #[test]
    fn lut_flags_empty_cells() {
        let obs = [
            PairObservation {
                image: 0,
                i: 0,
                j: 1,
                score: 1.0,
                y_i: 0,
                y_j: 0,
            },
            PairObservation {
                image: 1,
                i: 0,
                j: 1,
                score: 3.0,
                y_i: 1,
                y_j: 1,
            },
        ];
        let t = CellTable::from_observations(2, &obs).unwrap();
        let fit = fit_noise_model(&t, NoiseFamily::Lut).unwrap();
        assert_eq!(fit.empty_cells, vec![(0, 1), (0, 2)]);
        assert_eq!(fit.model.lut[0], vec![1.0, 2.0, 2.0, 3.0]);
    }

    #[test]
    fn constant_fvu_is_one() {
        let (u, v) = class_values(4, 2);
        let t = table_for(NoiseModel::static_bonus(u, v, 0.5), 4, 300, 0.3, 2);
        let fit = fit_noise_model(&t, NoiseFamily::Constant).unwrap();
        assert!((fit.fvu - 1.0).abs() < 1e-12);
        assert!((fit.model.constant.unwrap() - t.mean).abs() < 1e-15);
    }

    #[test]
    fn recovers_static_bonus() {
        let (u, v) = class_values(6, 3);
        let t = table_for(NoiseModel::static_bonus(u, v, 0.5), 6, 500, 0.0, 3);
        let fit = fit_noise_model(&t, NoiseFamily::OrStaticBonus).unwrap();
        assert!(fit.fvu < 1e-10, "{fit:?}");
        assert!((fit.model.delta.unwrap() - 0.5).abs() < 1e-6, "{fit:?}");
    }

    #[test]
    fn recovers_other_families() {
        let (u, v) = class_values(5, 4);
        for family in [
            NoiseFamily::OnlyOr,
            NoiseFamily::OnlyAnd,
            NoiseFamily::Additive,
        ] {
            let t = table_for(
                NoiseModel::class_values(family, u.clone(), v.clone()),
                5,
                400,
                0.0,
                4,
            );
            let fit = fit_noise_model(&t, family).unwrap();
            assert!(fit.fvu < 1e-8, "{family}: {}", fit.fvu);
        }
        let sets: Vec<Vec<usize>> = all_pairs(5).iter().map(|p| p.class_set.clone()).collect();
        let deltas: Vec<f64> = (0..sets.len()).map(|p| 0.2 + 0.05 * p as f64).collect();
        let t = table_for(
            NoiseModel::variable_bonus(u, v, sets, deltas),
            5,
            400,
            0.0,
            4,
        );
        let fit = fit_noise_model(&t, NoiseFamily::OrVariableBonus).unwrap();
        assert!(fit.fvu < 1e-8, "{}", fit.fvu);
    }

    #[test]
    fn nested_families_are_ordered() {
        let (u, v) = class_values(6, 9);
        let t = table_for(NoiseModel::static_bonus(u, v, 0.5), 6, 400, 0.5, 9);
        let fits = fit_all_families(&t).unwrap();
        let fvu = |f: NoiseFamily| fits.iter().find(|x| x.model.family == f).unwrap().fvu;
        use NoiseFamily::*;
        let chain = [Lut, OrVariableBonus, OrStaticBonus, OnlyOr, Constant];
        for w in chain.windows(2) {
            assert!(fvu(w[0]) <= fvu(w[1]) + 1e-6, "{} > {}", w[0], w[1]);
        }
        assert!(fvu(Lut) <= fvu(Additive) + 1e-6 && fvu(Additive) <= fvu(Constant) + 1e-6);
        let report = fit_report_csv(&fits);
        assert_eq!(report.lines().count(), 8);
        assert!(report.starts_with("family,fvu,delta,delta_q1,delta_q3,sweeps,converged\n"));
    }

    #[test]
    fn generation_is_deterministic_and_noisy() {
        let labels = random_labels(3, 50, 1);
        let prompts = all_pairs(3);
        let (u, v) = class_values(3, 1);
        let p = NoiseGenParams::unbiased(NoiseModel::static_bonus(u, v, 0.5), 50, 0.1);
        let a = generate_scores(&labels, &prompts, &p, 11).unwrap();
        assert_eq!(a, generate_scores(&labels, &prompts, &p, 11).unwrap());
        assert_ne!(a, generate_scores(&labels, &prompts, &p, 12).unwrap());
        let bad = NoiseGenParams { sigma: -1.0, ..p };
        assert!(generate_scores(&labels, &prompts, &bad, 11).is_err());
    }

    #[test]
    fn family_names_round_trip() {
        for f in NoiseFamily::ALL {
            assert_eq!(f.name().parse::<NoiseFamily>().unwrap(), f);
        }
        assert!("or".parse::<NoiseFamily>().is_err());
    }
}
