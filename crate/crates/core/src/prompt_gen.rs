//! Compound prompt generation from co-occurrence statistics.
//!
//! Pairs `(i, j)` with `i < j` are kept when `P(j | i) > tau2`; each kept pair
//! may be extended to a triplet with the most likely third class when that
//! conditional exceeds `tau3`. Triplets that land on the same class set are
//! reduced to the one with the larger conditional.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Result, SparcError};
use crate::model::{ClassVocabulary, CooccurrenceStats, PromptKind, PromptSpec};
use crate::rng::{domain, Stream};

pub const DEFAULT_TAU2: f64 = 0.1;
pub const DEFAULT_TAU3: f64 = 0.3;
pub const DEFAULT_PAIR_TEMPLATE: &str = "{A} and {B}";
pub const DEFAULT_TRIPLET_TEMPLATE: &str = "{A}, {B}, and {C}";
pub const RANDOMIZED_TEMPLATE: &str = "A photo of a {A}, which is {RAND}";

/// Externally supplied prompt with a declared class set.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtraPrompt {
    pub text: String,
    pub class_set: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptGenConfig {
    pub tau2: f64,
    pub tau3: f64,
    pub pair_template: String,
    pub triplet_template: String,
    pub extra_prompts: Vec<ExtraPrompt>,
    /// Id given to the first emitted prompt; the rest follow consecutively.
    pub first_id: u32,
}

impl Default for PromptGenConfig {
    fn default() -> Self {
        Self {
            tau2: DEFAULT_TAU2,
            tau3: DEFAULT_TAU3,
            pair_template: DEFAULT_PAIR_TEMPLATE.to_string(),
            triplet_template: DEFAULT_TRIPLET_TEMPLATE.to_string(),
            extra_prompts: Vec::new(),
            first_id: 0,
        }
    }
}

impl PromptGenConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, tau) in [("tau2", self.tau2), ("tau3", self.tau3)] {
            if !(0.0..=1.0).contains(&tau) {
                return Err(SparcError::invalid(format!(
                    "{name} = {tau} outside [0, 1]"
                )));
            }
        }
        check_slots(&self.pair_template, &["{A}", "{B}"])?;
        check_slots(&self.triplet_template, &["{A}", "{B}", "{C}"])
    }
}

fn check_slots(template: &str, slots: &[&str]) -> Result<()> {
    for slot in slots {
        let count = template.matches(slot).count();
        if count != 1 {
            return Err(SparcError::invalid(format!(
                "template {template:?} must contain {slot} exactly once (found {count})"
            )));
        }
    }
    Ok(())
}

/// Substitute class names into a template's `{A}`, `{B}`, `{C}` slots.
pub fn fill_template(template: &str, names: &[&str]) -> String {
    let mut out = template.to_string();
    for (slot, name) in ["{A}", "{B}", "{C}"].iter().zip(names) {
        out = out.replacen(slot, name, 1);
    }
    out
}

/// Pair templates compared in the template ablation; the first is the default.
pub fn builtin_pair_templates() -> Vec<&'static str> {
    vec![
        "{A} and {B}",
        "{A} or {B}",
        "{A} with {B}",
        "{A} next to {B}",
        "{A} and not {B}",
    ]
}

struct Triplet {
    pair: (usize, usize),
    third: usize,
    cond: f64,
}

pub fn generate_compound_prompts(
    vocab: &ClassVocabulary,
    cooc: &CooccurrenceStats,
    config: &PromptGenConfig,
) -> Result<Vec<PromptSpec>> {
    config.validate()?;
    let n = vocab.len();
    if n < 2 {
        return Err(SparcError::invalid("vocabulary needs at least 2 classes"));
    }
    if cooc.num_classes() != n {
        return Err(SparcError::invalid(format!(
            "co-occurrence covers {} classes, vocabulary has {n}",
            cooc.num_classes()
        )));
    }

    // (class_set, text)
    let mut emitted: BTreeSet<(Vec<usize>, String)> = BTreeSet::new();
    let mut best_triplet: BTreeMap<[usize; 3], Triplet> = BTreeMap::new();

    for i in 0..n {
        for j in i + 1..n {
            if cooc.pair_cond(i, j) <= config.tau2 {
                continue;
            }
            emitted.insert((
                vec![i, j],
                fill_template(&config.pair_template, &[vocab.name(i), vocab.name(j)]),
            ));
            // argmax over k, ties to the smallest k
            let mut best: Option<(usize, f64)> = None;
            for k in (0..n).filter(|&k| k != i && k != j) {
                let p = cooc.triplet_cond(i, j, k);
                if best.is_none_or(|(_, b)| p > b) {
                    best = Some((k, p));
                }
            }
            let Some((k, cond)) = best else { continue };
            if cond <= config.tau3 {
                continue;
            }
            let mut key = [i, j, k];
            key.sort_unstable();
            let candidate = Triplet {
                pair: (i, j),
                third: k,
                cond,
            };
            match best_triplet.get(&key) {
                // pairs are visited in lexicographic order, so on a tie the
                // incumbent already has the smaller generating pair
                Some(existing) if existing.cond >= candidate.cond => {}
                _ => {
                    best_triplet.insert(key, candidate);
                }
            }
        }
    }

    for (key, t) in &best_triplet {
        let text = fill_template(
            &config.triplet_template,
            &[
                vocab.name(t.pair.0),
                vocab.name(t.pair.1),
                vocab.name(t.third),
            ],
        );
        emitted.insert((key.to_vec(), text));
    }

    for extra in &config.extra_prompts {
        let set: BTreeSet<usize> = extra.class_set.iter().copied().collect();
        if !(2..=3).contains(&set.len()) || set.iter().any(|&c| c >= n) {
            return Err(SparcError::invalid(format!(
                "extra prompt {:?} must mention 2 or 3 distinct classes below {n}",
                extra.text
            )));
        }
        emitted.insert((set.into_iter().collect(), extra.text.clone()));
    }

    Ok(emitted
        .into_iter()
        .enumerate()
        .map(|(idx, (set, text))| {
            PromptSpec::new(
                config.first_id + idx as u32,
                text,
                PromptKind::Compound,
                &set,
            )
        })
        .collect())
}

/// Randomized single-class prompts for the semantics ablation:
/// `"A photo of a {c_i}, which is {RAND}"` with `RAND` drawn uniformly from
/// `a..=z`. Prompts are grouped by class, `per_class` each.
pub fn generate_randomized_prompts(
    vocab: &ClassVocabulary,
    per_class: usize,
    rand_len: usize,
    seed: u64,
    first_id: u32,
) -> Vec<PromptSpec> {
    let mut rng = Stream::for_domain(seed, domain::PROMPTS, 0);
    let mut out = Vec::with_capacity(vocab.len() * per_class);
    for c in 0..vocab.len() {
        for _ in 0..per_class {
            let rand: String = (0..rand_len)
                .map(|_| (b'a' + rng.below(26) as u8) as char)
                .collect();
            let text = RANDOMIZED_TEMPLATE
                .replacen("{A}", vocab.name(c), 1)
                .replacen("{RAND}", &rand, 1);
            let id = first_id + out.len() as u32;
            out.push(PromptSpec::new(id, text, PromptKind::Compound, &[c]));
        }
    }
    out
}
