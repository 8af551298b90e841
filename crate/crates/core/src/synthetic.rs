//! Labeled synthetic score bundles.
//!
//! Class 0 is the target. Its label is Bernoulli(`p0`); every other class is
//! present with probability `rho` on target-positive images and `q` on
//! target-negative ones, independently given the target. The scorer sees
//! labels through independent flips with probability `nu`. Singleton and
//! auxiliary scores are `theta1_t * (u_i + y~_i (v_i - u_i)) + theta0_t + eps`;
//! compound scores follow the configured noise family on the flipped labels.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Result, SparcError};
use crate::model::{
    ClassVocabulary, LabelMatrix, PromptKind, PromptSpec, ScoreBundle, ScoreMatrix,
};
use crate::noise::{generate_scores, NoiseFamily, NoiseGenParams, NoiseModel};
use crate::rng::{domain, Stream};

/// Which compound prompts a synthetic bundle carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptSet {
    /// `class0 and classj` for `j = 1..=m`.
    Star(usize),
    /// Every unordered pair of classes.
    AllPairs,
}

impl std::fmt::Display for PromptSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PromptSet::Star(m) => write!(f, "star:{m}"),
            PromptSet::AllPairs => f.write_str("all_pairs"),
        }
    }
}

impl FromStr for PromptSet {
    type Err = SparcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "all_pairs" => Ok(PromptSet::AllPairs),
            Some(("star", m)) => m
                .parse()
                .map(PromptSet::Star)
                .map_err(|_| SparcError::invalid(format!("bad star size in {s:?}"))),
            _ => Err(SparcError::invalid(format!(
                "unknown prompt set {s:?} (star:<m> | all_pairs)"
            ))),
        }
    }
}

impl PromptSet {
    pub fn class_sets(self, num_classes: usize) -> Result<Vec<Vec<usize>>> {
        match self {
            PromptSet::Star(m) => {
                if m == 0 || m >= num_classes {
                    return Err(SparcError::invalid(format!(
                        "star prompt set needs 1 <= m < {num_classes}, got {m}"
                    )));
                }
                Ok((1..=m).map(|j| vec![0, j]).collect())
            }
            PromptSet::AllPairs => Ok((0..num_classes)
                .flat_map(|i| (i + 1..num_classes).map(move |j| vec![i, j]))
                .collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub num_images: usize,
    /// Prior of the target class.
    pub p0: f64,
    /// `P(y_i = 1 | y_0 = 1)`.
    pub rho: f64,
    /// `P(y_i = 1 | y_0 = 0)`.
    pub q: f64,
    /// Label-flip probability.
    pub nu: f64,
    pub family: NoiseFamily,
    /// AND bonus for the bonus families (center of the per-prompt spread for
    /// the variable one).
    pub delta: f64,
    /// SD of additive score noise.
    pub sigma: f64,
    /// SD of the per-image offset `theta0`.
    pub theta0_sd: f64,
    /// SD of `ln theta1`.
    pub theta1_log_sd: f64,
    pub prompts: PromptSet,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            num_images: 2000,
            p0: 0.3,
            rho: 0.5,
            q: 0.1,
            nu: 0.1,
            family: NoiseFamily::OrStaticBonus,
            delta: 0.5,
            sigma: 0.5,
            theta0_sd: 0.3,
            theta1_log_sd: 0.2,
            prompts: PromptSet::Star(12),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SparcError::invalid(msg));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.num_images < 2 {
            return bad(format!("need at least 2 images, got {}", self.num_images));
        }
        if !(self.p0 > 0.0 && self.p0 < 1.0) {
            return bad(format!("p0 must lie in (0, 1), got {}", self.p0));
        }
        if !(self.q > 0.0 && self.q < self.rho && self.rho < 1.0) {
            return bad(format!(
                "need 0 < q < rho < 1, got q = {}, rho = {}",
                self.q, self.rho
            ));
        }
        if !(self.nu >= 0.0 && self.nu < 0.5) {
            return bad(format!("nu must lie in [0, 1/2), got {}", self.nu));
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("theta0_sd", self.theta0_sd),
            ("theta1_log_sd", self.theta1_log_sd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !self.delta.is_finite() {
            return bad(format!("delta must be finite, got {}", self.delta));
        }
        self.prompts.class_sets(self.num_classes).map(|_| ())
    }

    /// Parse a flat `key = value` file; `#` starts a comment. Unset keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SparcError::invalid(format!("line {}: expected key = value", n + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let err =
                || SparcError::invalid(format!("line {}: bad value {value:?} for {key}", n + 1));
            match key {
                "classes" => cfg.num_classes = value.parse().map_err(|_| err())?,
                "images" => cfg.num_images = value.parse().map_err(|_| err())?,
                "seed" => cfg.seed = value.parse().map_err(|_| err())?,
                "family" => cfg.family = value.parse()?,
                "prompts" => cfg.prompts = value.parse()?,
                _ => {
                    let v: f64 = value.parse().map_err(|_| err())?;
                    match key {
                        "p0" => cfg.p0 = v,
                        "rho" => cfg.rho = v,
                        "q" => cfg.q = v,
                        "nu" => cfg.nu = v,
                        "delta" => cfg.delta = v,
                        "sigma" => cfg.sigma = v,
                        "theta0_sd" => cfg.theta0_sd = v,
                        "theta1_log_sd" => cfg.theta1_log_sd = v,
                        _ => {
                            return Err(SparcError::invalid(format!(
                                "line {}: unknown key {key:?}",
                                n + 1
                            )))
                        }
                    }
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SparcError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "classes = {}", self.num_classes);
        let _ = writeln!(out, "images = {}", self.num_images);
        let _ = writeln!(out, "p0 = {}", self.p0);
        let _ = writeln!(out, "rho = {}", self.rho);
        let _ = writeln!(out, "q = {}", self.q);
        let _ = writeln!(out, "nu = {}", self.nu);
        let _ = writeln!(out, "family = {}", self.family);
        let _ = writeln!(out, "delta = {}", self.delta);
        let _ = writeln!(out, "sigma = {}", self.sigma);
        let _ = writeln!(out, "theta0_sd = {}", self.theta0_sd);
        let _ = writeln!(out, "theta1_log_sd = {}", self.theta1_log_sd);
        let _ = writeln!(out, "prompts = {}", self.prompts);
        let _ = writeln!(out, "seed = {}", self.seed);
        out
    }

    pub fn vocabulary(&self) -> Result<ClassVocabulary> {
        ClassVocabulary::new((0..self.num_classes).map(|i| format!("class{i:02}")))
    }
}

fn image_ids(m: usize) -> Vec<String> {
    (0..m).map(|t| format!("img{t:06}")).collect()
}

fn sample_labels_unchecked(cfg: &SyntheticConfig) -> LabelMatrix {
    let n = cfg.num_classes;
    let rows: Vec<Vec<u8>> = (0..cfg.num_images)
        .into_par_iter()
        .map(|t| {
            let mut s = Stream::for_domain(cfg.seed, domain::LABELS, t as u64);
            let y0 = s.bernoulli(cfg.p0);
            let rate = if y0 { cfg.rho } else { cfg.q };
            std::iter::once(u8::from(y0))
                .chain((1..n).map(|_| u8::from(s.bernoulli(rate))))
                .collect()
        })
        .collect();
    LabelMatrix::new(rows.concat(), image_ids(cfg.num_images), n).expect("consistent shape")
}

/// True labels with the star dependence on class 0.
pub fn sample_labels(cfg: &SyntheticConfig) -> Result<LabelMatrix> {
    cfg.validate()?;
    Ok(sample_labels_unchecked(cfg))
}

/// Flip every cell independently with probability `nu`.
pub fn flip_labels(labels: &LabelMatrix, nu: f64, seed: u64) -> Result<LabelMatrix> {
    if !(0.0..0.5).contains(&nu) {
        return Err(SparcError::invalid(format!(
            "nu must lie in [0, 1/2), got {nu}"
        )));
    }
    let n = labels.cols();
    let rows: Vec<Vec<u8>> = (0..labels.rows())
        .into_par_iter()
        .map(|t| {
            let mut s = Stream::for_domain(seed, domain::FLIPS, t as u64);
            labels
                .row(t)
                .iter()
                .map(|&y| if s.bernoulli(nu) { 1 - y } else { y })
                .collect()
        })
        .collect();
    LabelMatrix::new(rows.concat(), labels.image_ids.clone(), n)
}

/// Per-class values `(u, v)`: `u_i ~ U(-0.5, 0)` and `v_i - u_i ~ U(0.5, 1.5)`.
pub fn class_values(cfg: &SyntheticConfig) -> (Vec<f64>, Vec<f64>) {
    let mut s = Stream::for_domain(cfg.seed, domain::CLASS_PARAMS, 0);
    let u: Vec<f64> = (0..cfg.num_classes)
        .map(|_| s.uniform_range(-0.5, 0.0))
        .collect();
    let v = u.iter().map(|x| x + s.uniform_range(0.5, 1.5)).collect();
    (u, v)
}

/// Noise model used for compound prompts.
pub fn class_model(cfg: &SyntheticConfig, class_sets: &[Vec<usize>]) -> NoiseModel {
    let (u, v) = class_values(cfg);
    match cfg.family {
        NoiseFamily::Constant => NoiseModel::constant(0.0),
        NoiseFamily::OrStaticBonus => NoiseModel::static_bonus(u, v, cfg.delta),
        NoiseFamily::OrVariableBonus => {
            let mut s = Stream::for_domain(cfg.seed, domain::CLASS_PARAMS, 1);
            let d = class_sets
                .iter()
                .map(|_| cfg.delta + s.uniform_range(-0.1, 0.1))
                .collect();
            NoiseModel::variable_bonus(u, v, class_sets.to_vec(), d)
        }
        NoiseFamily::Lut => {
            let mut s = Stream::for_domain(cfg.seed, domain::CLASS_PARAMS, 2);
            let lut = class_sets
                .iter()
                .map(|set| (0..1usize << set.len()).map(|_| s.normal()).collect())
                .collect();
            NoiseModel::lookup_table(class_sets.to_vec(), lut)
        }
        family => NoiseModel::class_values(family, u, v),
    }
}

fn theta(cfg: &SyntheticConfig) -> (Vec<f64>, Vec<f64>) {
    (0..cfg.num_images)
        .into_par_iter()
        .map(|t| {
            let mut s = Stream::for_domain(cfg.seed, domain::THETA, t as u64);
            let t0 = cfg.theta0_sd * s.normal();
            let t1 = (cfg.theta1_log_sd * s.normal()).exp();
            (t0, t1)
        })
        .unzip()
}

fn class_scores(
    cfg: &SyntheticConfig,
    observed: &LabelMatrix,
    (u, v): &(Vec<f64>, Vec<f64>),
    theta: &(Vec<f64>, Vec<f64>),
    noise_domain: u16,
    prompt_ids: Vec<u32>,
) -> ScoreMatrix {
    let n = cfg.num_classes;
    let rows: Vec<Vec<f64>> = (0..cfg.num_images)
        .into_par_iter()
        .map(|t| {
            let mut s = Stream::for_domain(cfg.seed, noise_domain, t as u64);
            (0..n)
                .map(|i| {
                    let val = if observed.is_present(t, i) {
                        v[i]
                    } else {
                        u[i]
                    };
                    theta.1[t] * val + theta.0[t] + cfg.sigma * s.normal()
                })
                .collect()
        })
        .collect();
    ScoreMatrix::from_fn(observed.image_ids.clone(), prompt_ids, |t, i| rows[t][i])
}

/// Generate a complete bundle. Scores are rounded to binary32 so the bundle
/// survives a write/read cycle unchanged; the attached labels are the true
/// (unflipped) ones.
pub fn build_synthetic_bundle(cfg: &SyntheticConfig) -> Result<ScoreBundle> {
    cfg.validate()?;
    let n = cfg.num_classes;
    let vocab = cfg.vocabulary()?;
    let class_sets = cfg.prompts.class_sets(n)?;
    let mut prompts = Vec::with_capacity(2 * n + class_sets.len());
    for i in 0..n {
        prompts.push(PromptSpec::new(
            i as u32,
            format!("a photo of a {}", vocab.name(i)),
            PromptKind::Singleton,
            &[i],
        ));
    }
    for i in 0..n {
        prompts.push(PromptSpec::new(
            (n + i) as u32,
            vocab.name(i),
            PromptKind::Auxiliary,
            &[i],
        ));
    }
    let compound: Vec<PromptSpec> = class_sets
        .iter()
        .enumerate()
        .map(|(k, set)| {
            let names: Vec<&str> = set.iter().map(|&c| vocab.name(c)).collect();
            PromptSpec::new(
                (2 * n + k) as u32,
                names.join(" and "),
                PromptKind::Compound,
                set,
            )
        })
        .collect();

    let truth = sample_labels_unchecked(cfg);
    let observed = flip_labels(&truth, cfg.nu, cfg.seed)?;
    let model = class_model(cfg, &class_sets);
    let values = class_values(cfg);
    let theta = theta(cfg);
    let mut singleton = class_scores(
        cfg,
        &observed,
        &values,
        &theta,
        domain::SINGLETON_NOISE,
        (0..n as u32).collect(),
    );
    let mut auxiliary = class_scores(
        cfg,
        &observed,
        &values,
        &theta,
        domain::AUXILIARY_NOISE,
        (n as u32..2 * n as u32).collect(),
    );
    let gen = NoiseGenParams {
        model,
        theta0: theta.0,
        theta1: theta.1,
        sigma: cfg.sigma,
    };
    let mut compound_scores = generate_scores(&observed, &compound, &gen, cfg.seed)?;
    for m in [&mut singleton, &mut auxiliary, &mut compound_scores] {
        m.quantize_f32();
    }
    prompts.extend(compound);

    let mut provenance = BTreeMap::new();
    provenance.insert("source".to_string(), "synthetic".to_string());
    for line in cfg.to_text().lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            provenance.insert(format!("synthetic.{k}"), v.to_string());
        }
    }
    Ok(ScoreBundle::new(
        vocab,
        prompts,
        singleton,
        auxiliary,
        compound_scores,
        Some(truth),
        provenance,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_bundle;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            num_classes: 5,
            num_images: 200,
            prompts: PromptSet::AllPairs,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn conditional_rates() {
        let cfg = SyntheticConfig {
            num_classes: 2,
            num_images: 100_000,
            p0: 0.5,
            ..small()
        };
        let y = sample_labels(&cfg).unwrap();
        let (mut pos, mut hits) = (0.0, 0.0);
        for t in 0..y.rows() {
            if y.is_present(t, 0) {
                pos += 1.0;
                hits += f64::from(y.get(t, 1));
            }
        }
        let sd = (cfg.rho * (1.0 - cfg.rho) / pos).sqrt();
        assert!((hits / pos - cfg.rho).abs() < 3.0 * sd);
    }

    #[test]
    fn degenerate_overrides() {
        let cfg = SyntheticConfig { p0: 1.0, ..small() };
        assert!(cfg.validate().is_err());
        let y = sample_labels_unchecked(&cfg);
        assert!(y.column(0).iter().all(|&v| v == 1));
    }

    #[test]
    fn independence_when_rates_match() {
        // only reachable without validation
        let cfg = SyntheticConfig {
            num_classes: 2,
            num_images: 100_000,
            p0: 0.4,
            rho: 0.3,
            q: 0.3,
            ..small()
        };
        let y = sample_labels_unchecked(&cfg);
        let mut table = [[0.0f64; 2]; 2];
        for t in 0..y.rows() {
            table[y.get(t, 0) as usize][y.get(t, 1) as usize] += 1.0;
        }
        let total = y.rows() as f64;
        let mut chi2 = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                let expected = (table[a][0] + table[a][1]) * (table[0][b] + table[1][b]) / total;
                chi2 += (table[a][b] - expected).powi(2) / expected;
            }
        }
        // chi-square(1) critical value at alpha = 0.001
        assert!(chi2 < 10.828, "{chi2}");
    }

    #[test]
    fn flip_rate() {
        let y = LabelMatrix::new(vec![0; 1_000_000], image_ids(1000), 1000).unwrap();
        let f = flip_labels(&y, 0.1, 3).unwrap();
        let rate = f.values().iter().map(|&v| f64::from(v)).sum::<f64>() / 1e6;
        assert!((rate - 0.1).abs() < 3.0 * (0.09f64 / 1e6).sqrt());
        assert_eq!(flip_labels(&y, 0.0, 3).unwrap(), y);
        assert!(flip_labels(&y, 0.5, 3).is_err());
    }

    #[test]
    fn bundle_is_valid_and_deterministic() {
        for family in NoiseFamily::ALL {
            let cfg = SyntheticConfig { family, ..small() };
            let b = build_synthetic_bundle(&cfg).unwrap();
            assert_eq!(validate_bundle(&b), vec![], "{family}");
            assert_eq!(b, build_synthetic_bundle(&cfg).unwrap());
        }
        let b = build_synthetic_bundle(&small()).unwrap();
        assert_eq!(b.compound.cols(), 10);
        assert_eq!(b.provenance["source"], "synthetic");
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = SyntheticConfig {
            seed: 42,
            nu: 0.05,
            prompts: PromptSet::Star(3),
            ..small()
        };
        assert_eq!(SyntheticConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(SyntheticConfig::parse("rho = 0.1\nq = 0.2\n").is_err());
        assert!(SyntheticConfig::parse("colour = red\n").is_err());
        assert!(SyntheticConfig::parse("nu 0.1\n").is_err());
        let c = SyntheticConfig::parse("# comment\nseed = 9 # trailing\n").unwrap();
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn prompt_sets() {
        assert_eq!(
            PromptSet::Star(2).class_sets(4).unwrap(),
            vec![vec![0, 1], vec![0, 2]]
        );
        assert_eq!(PromptSet::AllPairs.class_sets(4).unwrap().len(), 6);
        assert!(PromptSet::Star(4).class_sets(4).is_err());
        assert_eq!("star:7".parse::<PromptSet>().unwrap(), PromptSet::Star(7));
        assert!("star".parse::<PromptSet>().is_err());
    }
}
