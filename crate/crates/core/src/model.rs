//! Domain types shared by every stage of the pipeline.
//!
//! Class identity is the positional index into [`ClassVocabulary`]; names are
//! only consulted at I/O boundaries.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SparcError};

/// Provenance key marking every compound prompt of a bundle as a randomized
/// (single-class) ablation prompt.
pub const PROVENANCE_COMPOUND_KIND: &str = "compound_prompts";
pub const RANDOMIZED: &str = "randomized";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassVocabulary {
    names: Vec<String>,
}

impl ClassVocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let vocab = Self { names };
        let problems = vocab.violations();
        if problems.is_empty() {
            Ok(vocab)
        } else {
            Err(SparcError::Validation(problems))
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.names.len() < 2 {
            out.push(Violation::new(
                "vocabulary",
                "min_classes",
                format!("need at least 2 classes, found {}", self.names.len()),
            ));
        }
        let mut seen = HashSet::new();
        for (i, name) in self.names.iter().enumerate() {
            if name.is_empty() {
                out.push(Violation::new(
                    format!("vocabulary[{i}]"),
                    "non_empty",
                    "class name is empty",
                ));
            } else if !seen.insert(name.as_str()) {
                out.push(Violation::new(
                    format!("vocabulary[{i}]"),
                    "unique",
                    format!("duplicate class name {name:?}"),
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Singleton,
    Auxiliary,
    Compound,
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptKind::Singleton => "singleton",
            PromptKind::Auxiliary => "auxiliary",
            PromptKind::Compound => "compound",
        })
    }
}

impl std::str::FromStr for PromptKind {
    type Err = SparcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "singleton" => Ok(PromptKind::Singleton),
            "auxiliary" => Ok(PromptKind::Auxiliary),
            "compound" => Ok(PromptKind::Compound),
            other => Err(SparcError::invalid(format!(
                "unknown prompt kind {other:?}"
            ))),
        }
    }
}

/// A prompt's text, kind and the classes it mentions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub id: u32,
    pub text: String,
    pub kind: PromptKind,
    /// Sorted, duplicate-free class indices.
    pub class_set: Vec<usize>,
}

impl PromptSpec {
    pub fn new(id: u32, text: impl Into<String>, kind: PromptKind, classes: &[usize]) -> Self {
        let set: BTreeSet<usize> = classes.iter().copied().collect();
        Self {
            id,
            text: text.into(),
            kind,
            class_set: set.into_iter().collect(),
        }
    }

    pub fn mentions(&self, class: usize) -> bool {
        self.class_set.binary_search(&class).is_ok()
    }
}

/// Where in the pipeline a score matrix comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreStage {
    #[default]
    Raw,
    ImageDebiased,
    Debiased,
    Refined,
}

/// Dense `M x P` score matrix, row-major, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    pub image_ids: Vec<String>,
    pub prompt_ids: Vec<u32>,
    pub stage: ScoreStage,
}

impl ScoreMatrix {
    pub fn new(values: Vec<f64>, image_ids: Vec<String>, prompt_ids: Vec<u32>) -> Result<Self> {
        let (rows, cols) = (image_ids.len(), prompt_ids.len());
        if values.len() != rows * cols {
            return Err(SparcError::LengthMismatch {
                expected: rows * cols,
                found: values.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            values,
            image_ids,
            prompt_ids,
            stage: ScoreStage::Raw,
        })
    }

    pub fn from_fn(
        image_ids: Vec<String>,
        prompt_ids: Vec<u32>,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Self {
        let (rows, cols) = (image_ids.len(), prompt_ids.len());
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Self {
            rows,
            cols,
            values,
            image_ids,
            prompt_ids,
            stage: ScoreStage::Raw,
        }
    }

    pub fn with_stage(mut self, stage: ScoreStage) -> Self {
        self.stage = stage;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.cols + col] = v;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, col)).collect()
    }

    /// Round every entry through binary32, the on-disk precision.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.values {
            *v = f64::from(*v as f32);
        }
    }
}

/// Binary `M x N` ground-truth presence matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    rows: usize,
    cols: usize,
    values: Vec<u8>,
    pub image_ids: Vec<String>,
}

impl LabelMatrix {
    pub fn new(values: Vec<u8>, image_ids: Vec<String>, cols: usize) -> Result<Self> {
        let rows = image_ids.len();
        if values.len() != rows * cols {
            return Err(SparcError::LengthMismatch {
                expected: rows * cols,
                found: values.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            values,
            image_ids,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.cols + col]
    }

    #[inline]
    pub fn is_present(&self, row: usize, col: usize) -> bool {
        self.get(row, col) != 0
    }

    pub fn row(&self, row: usize) -> &[u8] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn column(&self, col: usize) -> Vec<u8> {
        (0..self.rows).map(|r| self.get(r, col)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TripletSource {
    /// Explicit `P(k | i, j)` keyed by `(min(i,j), max(i,j), k)`; absent entries are 0.
    Sparse(BTreeMap<(usize, usize, usize), f64>),
    /// Per-class presence bitsets from a label matrix.
    Empirical { columns: Vec<Vec<u64>> },
}

/// Conditional co-occurrence probabilities `P(j | i)` and `P(k | i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceStats {
    n: usize,
    pair: Vec<f64>,
    triplets: TripletSource,
}

impl CooccurrenceStats {
    /// `pair_cond[i][j] = P(j | i)`; the diagonal is forced to 1.
    pub fn from_pairs(
        pair_cond: Vec<Vec<f64>>,
        triplets: BTreeMap<(usize, usize, usize), f64>,
    ) -> Result<Self> {
        let n = pair_cond.len();
        let mut pair = Vec::with_capacity(n * n);
        for (i, row) in pair_cond.iter().enumerate() {
            if row.len() != n {
                return Err(SparcError::invalid(format!(
                    "co-occurrence row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            for (j, &p) in row.iter().enumerate() {
                check_probability(p, || format!("P({j}|{i})"))?;
                pair.push(if i == j { 1.0 } else { p });
            }
        }
        let mut sparse = BTreeMap::new();
        for (&(i, j, k), &p) in &triplets {
            if i >= n || j >= n || k >= n || i == j || j == k || i == k {
                return Err(SparcError::invalid(format!(
                    "triplet ({i},{j},{k}) is not a distinct triple below {n}"
                )));
            }
            check_probability(p, || format!("P({k}|{i},{j})"))?;
            sparse.insert((i.min(j), i.max(j), k), p);
        }
        Ok(Self {
            n,
            pair,
            triplets: TripletSource::Sparse(sparse),
        })
    }

    /// Empirical conditionals from a label matrix. Conditioning on an event
    /// that never occurs yields 0.
    pub fn from_labels(labels: &LabelMatrix) -> Self {
        let n = labels.cols();
        let words = labels.rows().div_ceil(64);
        let mut columns = vec![vec![0u64; words]; n];
        for t in 0..labels.rows() {
            for (c, col) in columns.iter_mut().enumerate() {
                if labels.is_present(t, c) {
                    col[t / 64] |= 1 << (t % 64);
                }
            }
        }
        let count = |a: &[u64]| a.iter().map(|w| w.count_ones() as u64).sum::<u64>();
        let mut pair = vec![0.0; n * n];
        for i in 0..n {
            let ni = count(&columns[i]);
            for j in 0..n {
                pair[i * n + j] = if i == j {
                    1.0
                } else if ni == 0 {
                    0.0
                } else {
                    let both: u64 = columns[i]
                        .iter()
                        .zip(&columns[j])
                        .map(|(a, b)| (a & b).count_ones() as u64)
                        .sum();
                    both as f64 / ni as f64
                };
            }
        }
        Self {
            n,
            pair,
            triplets: TripletSource::Empirical { columns },
        }
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    /// `P(j | i)`.
    pub fn pair_cond(&self, i: usize, j: usize) -> f64 {
        self.pair[i * self.n + j]
    }

    /// `P(k | i, j)`.
    pub fn triplet_cond(&self, i: usize, j: usize, k: usize) -> f64 {
        match &self.triplets {
            TripletSource::Sparse(map) => map.get(&(i.min(j), i.max(j), k)).copied().unwrap_or(0.0),
            TripletSource::Empirical { columns } => {
                let (mut both, mut all) = (0u64, 0u64);
                for ((a, b), c) in columns[i].iter().zip(&columns[j]).zip(&columns[k]) {
                    both += (a & b).count_ones() as u64;
                    all += (a & b & c).count_ones() as u64;
                }
                if both == 0 {
                    0.0
                } else {
                    all as f64 / both as f64
                }
            }
        }
    }
}

fn check_probability(p: f64, what: impl FnOnce() -> String) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(SparcError::invalid(format!(
            "{} = {p} is not a probability",
            what()
        )))
    }
}

/// Aligned singleton, auxiliary and compound score matrices plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBundle {
    pub vocabulary: ClassVocabulary,
    /// Sorted by id.
    pub prompts: Vec<PromptSpec>,
    pub singleton: ScoreMatrix,
    pub auxiliary: ScoreMatrix,
    pub compound: ScoreMatrix,
    pub labels: Option<LabelMatrix>,
    pub provenance: BTreeMap<String, String>,
}

impl ScoreBundle {
    pub fn new(
        vocabulary: ClassVocabulary,
        mut prompts: Vec<PromptSpec>,
        singleton: ScoreMatrix,
        auxiliary: ScoreMatrix,
        compound: ScoreMatrix,
        labels: Option<LabelMatrix>,
        provenance: BTreeMap<String, String>,
    ) -> Self {
        prompts.sort_by_key(|p| p.id);
        Self {
            vocabulary,
            prompts,
            singleton,
            auxiliary,
            compound,
            labels,
            provenance,
        }
    }

    pub fn num_images(&self) -> usize {
        self.singleton.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn image_ids(&self) -> &[String] {
        &self.singleton.image_ids
    }

    pub fn prompt(&self, id: u32) -> Option<&PromptSpec> {
        self.prompts
            .binary_search_by_key(&id, |p| p.id)
            .ok()
            .map(|i| &self.prompts[i])
    }

    /// Prompt specs for the compound matrix's columns, in column order.
    pub fn compound_prompts(&self) -> Vec<&PromptSpec> {
        self.compound
            .prompt_ids
            .iter()
            .filter_map(|&id| self.prompt(id))
            .collect()
    }

    pub fn randomized_compounds(&self) -> bool {
        self.provenance
            .get(PROVENANCE_COMPOUND_KIND)
            .is_some_and(|v| v == RANDOMIZED)
    }
}

/// One broken invariant: the offending field and the rule it breaks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: &'static str,
    pub detail: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, rule: &'static str, detail: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}]: {}", self.field, self.rule, self.detail)
    }
}

/// Check every bundle invariant. An empty list means the bundle is well formed.
pub fn validate_bundle(bundle: &ScoreBundle) -> Vec<Violation> {
    let mut out = bundle.vocabulary.violations();
    let n = bundle.vocabulary.len();
    let randomized = bundle.randomized_compounds();

    let mut ids = HashSet::new();
    let mut triples = HashSet::new();
    for p in &bundle.prompts {
        let field = format!("prompt {}", p.id);
        if !ids.insert(p.id) {
            out.push(Violation::new(
                &field,
                "duplicate_id",
                "prompt id appears twice",
            ));
        }
        let sorted_unique = p.class_set.windows(2).all(|w| w[0] < w[1]);
        if !sorted_unique {
            out.push(Violation::new(
                &field,
                "sorted_class_set",
                "class set must be sorted without duplicates",
            ));
        }
        let card = p.class_set.len();
        let card_ok = match p.kind {
            PromptKind::Singleton | PromptKind::Auxiliary => card == 1,
            PromptKind::Compound if randomized => (1..=3).contains(&card),
            PromptKind::Compound => (2..=3).contains(&card),
        };
        if !card_ok {
            out.push(Violation::new(
                &field,
                "cardinality",
                format!("{} prompt mentions {card} classes", p.kind),
            ));
        }
        if let Some(&bad) = p.class_set.iter().find(|&&c| c >= n) {
            out.push(Violation::new(
                &field,
                "class_index",
                format!("class index {bad} >= {n}"),
            ));
        }
        if !triples.insert((p.kind, p.class_set.clone(), p.text.clone())) {
            out.push(Violation::new(
                &field,
                "duplicate_triple",
                "(kind, class_set, text) repeats another prompt",
            ));
        }
    }

    let prompt_by_id: HashMap<u32, &PromptSpec> =
        bundle.prompts.iter().map(|p| (p.id, p)).collect();
    let reference_ids = &bundle.singleton.image_ids;

    for (name, matrix, kind) in [
        ("singleton", &bundle.singleton, PromptKind::Singleton),
        ("auxiliary", &bundle.auxiliary, PromptKind::Auxiliary),
        ("compound", &bundle.compound, PromptKind::Compound),
    ] {
        if matrix.values.len() != matrix.rows * matrix.cols
            || matrix.rows != matrix.image_ids.len()
            || matrix.cols != matrix.prompt_ids.len()
        {
            out.push(Violation::new(
                name,
                "shape",
                "dimensions disagree with ids",
            ));
            continue;
        }
        if &matrix.image_ids != reference_ids {
            out.push(Violation::new(
                name,
                "image_ids",
                "image ids differ from the singleton matrix",
            ));
        }
        if let Some(pos) = matrix.values.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos / matrix.cols.max(1), pos % matrix.cols.max(1));
            out.push(Violation::new(
                format!("{name}[{r},{c}]"),
                "finite",
                format!(
                    "non-finite score {} (row {r}, column {c})",
                    matrix.values[pos]
                ),
            ));
        }
        let mut seen = HashSet::new();
        for (c, id) in matrix.prompt_ids.iter().enumerate() {
            if !seen.insert(*id) {
                out.push(Violation::new(
                    format!("{name} column {c}"),
                    "prompt_ref",
                    format!("prompt id {id} used by two columns"),
                ));
            }
            match prompt_by_id.get(id) {
                None => out.push(Violation::new(
                    format!("{name} column {c}"),
                    "prompt_ref",
                    format!("unknown prompt id {id}"),
                )),
                Some(p) if p.kind != kind => out.push(Violation::new(
                    format!("{name} column {c}"),
                    "prompt_kind",
                    format!("prompt {id} is {} but matrix holds {kind}", p.kind),
                )),
                Some(p) => {
                    if kind != PromptKind::Compound && p.class_set != [c] {
                        out.push(Violation::new(
                            format!("{name} column {c}"),
                            "class_order",
                            format!("column {c} must be the prompt for class {c}"),
                        ));
                    }
                }
            }
        }
        if kind != PromptKind::Compound && matrix.cols != n {
            out.push(Violation::new(
                name,
                "shape",
                format!("expected {n} columns, found {}", matrix.cols),
            ));
        }
    }

    if let Some(labels) = &bundle.labels {
        if labels.values.len() != labels.rows * labels.cols || labels.cols != n {
            out.push(Violation::new(
                "labels",
                "shape",
                format!("expected {} x {n} labels", reference_ids.len()),
            ));
        }
        if &labels.image_ids != reference_ids {
            out.push(Violation::new(
                "labels",
                "image_ids",
                "image ids differ from the singleton matrix",
            ));
        }
        if let Some(pos) = labels.values.iter().position(|&v| v > 1) {
            out.push(Violation::new(
                format!(
                    "labels[{},{}]",
                    pos / labels.cols.max(1),
                    pos % labels.cols.max(1)
                ),
                "binary",
                format!("label value {}", labels.values[pos]),
            ));
        }
    }
    out
}
