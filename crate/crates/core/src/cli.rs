//! Command-line front end. `main` only forwards to [`run`].

use std::fmt::Write as _;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Result, SparcError};
use crate::eval::{compare_methods, default_strategies, mean_average_precision, EvalReport};
use crate::fusion::{sparc_pipeline, FusionConfig};
use crate::io::{
    import_csv, read_bundle, read_cooccurrence_csv, read_prompts_csv, read_score_table_csv,
    read_vocabulary, write_atomic, write_bundle, write_prompts_csv, write_score_table_csv,
};
use crate::model::{validate_bundle, PromptKind, PromptSpec, ScoreBundle};
use crate::noise::{fit_noise_model, fit_report_csv, CellTable, NoiseFamily, ScoreSource};
use crate::prompt_gen::{
    fill_template, generate_compound_prompts, generate_randomized_prompts, ExtraPrompt,
    PromptGenConfig, DEFAULT_PAIR_TEMPLATE, DEFAULT_TAU2, DEFAULT_TAU3, DEFAULT_TRIPLET_TEMPLATE,
};
use crate::synthetic::{build_synthetic_bundle, SyntheticConfig};
use crate::theory::{
    component_differences, theorem1_m_bounds, win_rate_difference_closed_form,
    win_rate_monte_carlo_with, MonteCarloOptions, TheoryParams, WORKED_EXAMPLE_NUS,
};

pub const SEED_ENV: &str = "SPARC_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "sparc",
    version,
    about = "Refine zero-shot multi-label scores with compound prompts"
)]
pub struct Cli {
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Log more (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a prompts file from a vocabulary and co-occurrence statistics.
    GenPrompts(GenPromptsArgs),
    /// Debias and fuse a bundle into refined per-class scores.
    Fuse(FuseArgs),
    /// Per-class AP and mAP against a bundle's labels.
    Eval(EvalArgs),
    /// Fit compound-score noise models and report FVU.
    FitNoise(FitNoiseArgs),
    /// Closed-form and simulated win-rate differences.
    Theory(TheoryArgs),
    /// Write a synthetic bundle from a config file.
    Simulate(SimulateArgs),
    /// Check a bundle against the format rules.
    Validate(ValidateArgs),
    /// Convert CSV scores and prompts into a bundle.
    Import(ImportArgs),
}

#[derive(Debug, Args)]
pub struct GenPromptsArgs {
    /// Class names, one per line.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Pairwise conditional table `P(j | i)`.
    #[arg(long, required_unless_present = "randomized")]
    pub pairs: Option<PathBuf>,
    /// Sparse triplet conditionals `i,j,k,prob`.
    #[arg(long, requires = "pairs")]
    pub triplets: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TAU2)]
    pub tau2: f64,
    #[arg(long, default_value_t = DEFAULT_TAU3)]
    pub tau3: f64,
    #[arg(long, default_value = DEFAULT_PAIR_TEMPLATE)]
    pub pair_template: String,
    #[arg(long, default_value = DEFAULT_TRIPLET_TEMPLATE)]
    pub triplet_template: String,
    /// Template of the singleton prompts.
    #[arg(long, default_value = "a photo of a {A}.")]
    pub singleton_template: String,
    /// Extra compound prompts in prompts-file format.
    #[arg(long, requires = "pairs")]
    pub extra: Option<PathBuf>,
    /// Emit this many randomized single-class prompts per class instead of
    /// co-occurrence compounds.
    #[arg(long, conflicts_with = "pairs")]
    pub randomized: Option<usize>,
    /// Length of the random suffix of randomized prompts.
    #[arg(long, default_value_t = 8)]
    pub rand_len: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FusionArgs {
    /// maxvariance | kmax:<k> | meangeq:<K> | singleton
    #[arg(long, default_value = "maxvariance")]
    pub strategy: String,
    /// Report the fused signal alone instead of adding it to the singleton score.
    #[arg(long)]
    pub no_merge: bool,
    /// Fall back to the singleton direction on a zero covariance.
    #[arg(long)]
    pub permissive: bool,
    /// Use the last rank when a class has fewer compound prompts than asked.
    #[arg(long)]
    pub clamp_rank: bool,
}

impl FusionArgs {
    fn config(&self) -> Result<FusionConfig> {
        Ok(FusionConfig {
            strategy: self.strategy.parse()?,
            merge: !self.no_merge,
            permissive: self.permissive,
            clamp_rank: self.clamp_rank,
        })
    }
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    pub bundle: PathBuf,
    #[command(flatten)]
    pub fusion: FusionArgs,
    /// Output directory for refined.csv, debias_stats.csv, classes.csv and weights.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub bundle: PathBuf,
    /// Score table written by `fuse`; otherwise the bundle is fused in place.
    #[arg(long, conflicts_with = "compare")]
    pub scores: Option<PathBuf>,
    #[command(flatten)]
    pub fusion: FusionArgs,
    /// Compare singleton, kmax, meangeq and maxvariance with and without merging.
    #[arg(long)]
    pub compare: bool,
    /// Largest rank in the comparison.
    #[arg(long, default_value_t = 4, requires = "compare")]
    pub k_max: usize,
    /// Dataset name in reports; defaults to the bundle directory name.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Per-class AP sorted best first, for bar charts.
    #[arg(long, conflicts_with = "compare")]
    pub bars: bool,
    /// Human-readable table instead of CSV.
    #[arg(long)]
    pub pretty: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitNoiseArgs {
    pub bundle: PathBuf,
    /// Comma-separated families; all by default.
    #[arg(long, value_delimiter = ',')]
    pub families: Vec<String>,
    /// raw | debiased
    #[arg(long, default_value = "debiased")]
    pub source: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[arg(long, default_value_t = 0.15)]
    pub rho: f64,
    #[arg(long, default_value_t = 0.01)]
    pub q: f64,
    #[arg(long, required_unless_present = "worked_example")]
    pub nu: Option<f64>,
    #[arg(long, required_unless_present_any = ["sweep_m", "bounds"])]
    pub m: Option<usize>,
    /// Joint law of observed and true target labels; defaults to the worked
    /// example's values.
    #[arg(long, requires_all = ["pi11", "pi01", "pi10"])]
    pub pi00: Option<f64>,
    #[arg(long, requires = "pi00")]
    pub pi11: Option<f64>,
    #[arg(long, requires = "pi00")]
    pub pi01: Option<f64>,
    #[arg(long, requires = "pi00")]
    pub pi10: Option<f64>,
    /// Range of m as `lo:hi`, inclusive.
    #[arg(long, conflicts_with = "m")]
    pub sweep_m: Option<String>,
    /// Run both worked-example flip rates.
    #[arg(long, conflicts_with = "nu")]
    pub worked_example: bool,
    /// Monte Carlo trials per row; 0 skips the simulation.
    #[arg(long, default_value_t = 0)]
    pub mc_trials: u64,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    /// Weight of the smaller label in simulated pair scores.
    #[arg(long, default_value_t = 0.5)]
    pub delta: f64,
    /// SD of Gaussian noise added to simulated pair scores.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    /// Report the lower bounds on m instead of differences.
    #[arg(long, conflicts_with = "components")]
    pub bounds: bool,
    /// Report the four component differences.
    #[arg(long)]
    pub components: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// `key = value` config; missing keys take defaults.
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed. `SPARC_SEED` applies when neither is set.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace an existing bundle.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub bundle: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    pub scores: PathBuf,
    pub prompts: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

/// Parse arguments, configure logging and threads, and run the command.
/// Text destined for stdout is returned rather than printed.
pub fn run(cli: Cli) -> Result<String> {
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(SparcError::invalid("--threads must be at least 1"));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match cli.command {
        Command::GenPrompts(a) => gen_prompts(&a),
        Command::Fuse(a) => fuse(&a),
        Command::Eval(a) => eval(&a),
        Command::FitNoise(a) => fit_noise(&a),
        Command::Theory(a) => theory(&a),
        Command::Simulate(a) => simulate(&a),
        Command::Validate(a) => validate(&a),
        Command::Import(a) => import(&a),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(SparcError::invalid(format!(
            "{} is not a file",
            path.display()
        )))
    }
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(SparcError::invalid(format!(
            "{} is not a directory",
            path.display()
        )))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| SparcError::io(path, e))
}

/// Write to `out` if given, otherwise hand the text back for stdout.
fn emit(out: Option<&Path>, text: String) -> Result<String> {
    match out {
        Some(path) => {
            write_atomic(path, text.as_bytes())?;
            Ok(String::new())
        }
        None => Ok(text),
    }
}

fn gen_prompts(a: &GenPromptsArgs) -> Result<String> {
    require_file(&a.vocab)?;
    for p in [&a.pairs, &a.triplets, &a.extra].into_iter().flatten() {
        require_file(p)?;
    }
    let vocab = read_vocabulary(&a.vocab)?;
    let n = vocab.len();
    let mut prompts = Vec::with_capacity(2 * n);
    for c in 0..n {
        let text = fill_template(&a.singleton_template, &[vocab.name(c)]);
        prompts.push(PromptSpec::new(c as u32, text, PromptKind::Singleton, &[c]));
    }
    for c in 0..n {
        prompts.push(PromptSpec::new(
            (n + c) as u32,
            vocab.name(c),
            PromptKind::Auxiliary,
            &[c],
        ));
    }
    let first_id = 2 * n as u32;
    let compound = match (&a.pairs, a.randomized) {
        (_, Some(k)) => generate_randomized_prompts(&vocab, k, a.rand_len, a.seed, first_id),
        (Some(pairs), None) => {
            let cooc = read_cooccurrence_csv(pairs, a.triplets.as_deref(), &vocab)?;
            let extra_prompts = match &a.extra {
                Some(path) => read_prompts_csv(path, &vocab)?
                    .into_iter()
                    .map(|p| ExtraPrompt {
                        text: p.text,
                        class_set: p.class_set,
                    })
                    .collect(),
                None => Vec::new(),
            };
            let cfg = PromptGenConfig {
                tau2: a.tau2,
                tau3: a.tau3,
                pair_template: a.pair_template.clone(),
                triplet_template: a.triplet_template.clone(),
                extra_prompts,
                first_id,
            };
            generate_compound_prompts(&vocab, &cooc, &cfg)?
        }
        (None, None) => return Err(SparcError::invalid("need --pairs or --randomized")),
    };
    log::info!("{} compound prompts", compound.len());
    prompts.extend(compound);
    write_prompts_csv(&a.out, &prompts, &vocab)?;
    Ok(String::new())
}

fn fuse(a: &FuseArgs) -> Result<String> {
    require_dir(&a.bundle)?;
    let cfg = a.fusion.config()?;
    let bundle = read_bundle(&a.bundle)?;
    let out = sparc_pipeline(&bundle, &cfg)?;
    create_dir(&a.out)?;
    write_score_table_csv(&a.out.join("refined.csv"), &out.refined, &bundle.vocabulary)?;

    let mut stats = String::from("kind,index,mean,sd\n");
    let s = &out.stats;
    for (kind, ls) in [
        ("singleton_image", &s.singleton_image),
        ("compound_image", &s.compound_image),
        ("singleton_prompt", &s.singleton_prompt),
        ("compound_prompt", &s.compound_prompt),
    ] {
        for (i, (mean, sd)) in ls.mean.iter().zip(&ls.sd).enumerate() {
            let _ = writeln!(stats, "{kind},{i},{mean},{sd}");
        }
    }
    write_atomic(&a.out.join("debias_stats.csv"), stats.as_bytes())?;

    let mut classes = String::from("class,m,passthrough\n");
    let mut weights = String::from("class,component,weight\n");
    for c in &out.classes {
        let name = bundle.vocabulary.name(c.class);
        let _ = writeln!(classes, "{name},{},{}", c.m, c.passthrough);
        for (k, w) in c.weights.iter().flatten().enumerate() {
            let _ = writeln!(weights, "{name},{k},{w}");
        }
    }
    write_atomic(&a.out.join("classes.csv"), classes.as_bytes())?;
    write_atomic(&a.out.join("weights.csv"), weights.as_bytes())?;
    Ok(String::new())
}

fn dataset_name(explicit: &Option<String>, bundle: &ScoreBundle, dir: &Path) -> String {
    explicit
        .clone()
        .or_else(|| bundle.provenance.get("dataset").cloned())
        .or_else(|| dir.file_name().map(|f| f.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "bundle".into())
}

fn eval(a: &EvalArgs) -> Result<String> {
    require_dir(&a.bundle)?;
    if let Some(p) = &a.scores {
        require_file(p)?;
    }
    let bundle = read_bundle(&a.bundle)?;
    let dataset = dataset_name(&a.dataset, &bundle, &a.bundle);
    if a.compare {
        let table = compare_methods(&bundle, &default_strategies(a.k_max), &dataset)?;
        let text = if a.pretty {
            table.to_pretty()
        } else {
            table.to_csv()
        };
        return emit(a.out.as_deref(), text);
    }
    let labels = bundle
        .labels
        .as_ref()
        .ok_or_else(|| SparcError::invalid("evaluation needs a labeled bundle"))?;
    let names = bundle.vocabulary.names();
    let report: EvalReport = match &a.scores {
        Some(path) => {
            let scores = read_score_table_csv(path, &bundle.vocabulary)?;
            let method = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            mean_average_precision(&scores, labels, names, &method, &dataset)?
        }
        None => {
            let cfg = a.fusion.config()?;
            let out = sparc_pipeline(&bundle, &cfg)?;
            let method = format!("{}{}", cfg.strategy, if cfg.merge { "+merge" } else { "" });
            mean_average_precision(&out.refined, labels, names, &method, &dataset)?
        }
    };
    for &c in &report.undefined {
        log::warn!("class {} has no positive labels; left out of mAP", names[c]);
    }
    let text = if a.pretty {
        report.to_pretty()
    } else if a.bars {
        report.bar_chart_csv()
    } else {
        report.to_csv()
    };
    emit(a.out.as_deref(), text)
}

fn fit_noise(a: &FitNoiseArgs) -> Result<String> {
    require_dir(&a.bundle)?;
    let source: ScoreSource = a.source.parse()?;
    let families: Vec<NoiseFamily> = if a.families.is_empty() {
        NoiseFamily::ALL.to_vec()
    } else {
        a.families
            .iter()
            .map(|f| f.trim().parse())
            .collect::<Result<_>>()?
    };
    let bundle = read_bundle(&a.bundle)?;
    let table = CellTable::from_bundle(&bundle, source)?;
    let fits = families
        .iter()
        .map(|&f| fit_noise_model(&table, f))
        .collect::<Result<Vec<_>>>()?;
    for fit in &fits {
        if !fit.converged {
            log::warn!(
                "{} stopped after {} sweeps without converging",
                fit.model.family,
                fit.sweeps
            );
        }
        if !fit.empty_cells.is_empty() {
            log::warn!(
                "{}: {} empty cells",
                fit.model.family,
                fit.empty_cells.len()
            );
        }
    }
    emit(a.out.as_deref(), fit_report_csv(&fits))
}

fn parse_range(s: &str) -> Result<RangeInclusive<usize>> {
    let bad = || SparcError::invalid(format!("bad range {s:?} (expected lo:hi)"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let lo: usize = lo.trim().parse().map_err(|_| bad())?;
    let hi: usize = hi.trim().parse().map_err(|_| bad())?;
    if lo > hi {
        return Err(bad());
    }
    Ok(lo..=hi)
}

fn theory(a: &TheoryArgs) -> Result<String> {
    let nus: Vec<f64> = match a.nu {
        Some(nu) => vec![nu],
        None => WORKED_EXAMPLE_NUS.to_vec(),
    };
    let ms: Vec<usize> = match (&a.sweep_m, a.m) {
        (Some(r), _) => parse_range(r)?.collect(),
        (None, Some(m)) => vec![m],
        (None, None) => vec![2],
    };
    let params = |nu: f64, m: usize| -> Result<TheoryParams> {
        let mut p = TheoryParams::worked_example(nu, m);
        p.rho = a.rho;
        p.q = a.q;
        if let (Some(pi00), Some(pi11), Some(pi01), Some(pi10)) = (a.pi00, a.pi11, a.pi01, a.pi10) {
            (p.pi00, p.pi11, p.pi01, p.pi10) = (pi00, pi11, pi01, pi10);
        }
        p.validate()?;
        Ok(p)
    };

    let mut out = String::new();
    if a.bounds {
        out.push_str("nu,bound1,bound2,max\n");
        for &nu in &nus {
            let b = theorem1_m_bounds(&params(nu, ms[0])?)?;
            let _ = writeln!(out, "{nu},{},{},{}", b.bound1, b.bound2, b.max());
        }
    } else if a.components {
        out.push_str("nu,m,d_hh,d_hl,d_lh,d_ll,sum\n");
        for &nu in &nus {
            for &m in &ms {
                let d = component_differences(&params(nu, m)?)?;
                let _ = writeln!(
                    out,
                    "{nu},{m},{},{},{},{},{}",
                    d.d_hh,
                    d.d_hl,
                    d.d_lh,
                    d.d_ll,
                    d.sum()
                );
            }
        }
    } else {
        out.push_str("nu,m,delta_closed,delta_mc,se\n");
        for &nu in &nus {
            for &m in &ms {
                let p = params(nu, m)?;
                let closed = win_rate_difference_closed_form(&p)?;
                if a.mc_trials > 0 {
                    let opts = MonteCarloOptions {
                        delta: a.delta,
                        sigma: a.sigma,
                        ..MonteCarloOptions::new(a.mc_trials, a.seed)
                    };
                    let mc = win_rate_monte_carlo_with(&p, &opts)?;
                    let _ = writeln!(
                        out,
                        "{nu},{m},{closed},{},{}",
                        mc.estimate, mc.standard_error
                    );
                } else {
                    let _ = writeln!(out, "{nu},{m},{closed},,");
                }
            }
        }
    }
    emit(a.out.as_deref(), out)
}

fn config_sets_seed(text: &str) -> bool {
    text.lines()
        .filter_map(|l| l.split('#').next()?.split_once('='))
        .any(|(k, _)| k.trim() == "seed")
}

fn simulate(a: &SimulateArgs) -> Result<String> {
    let text = match &a.config {
        Some(path) => {
            require_file(path)?;
            std::fs::read_to_string(path).map_err(|e| SparcError::io(path, e))?
        }
        None => String::new(),
    };
    let mut cfg = SyntheticConfig::parse(&text)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    } else if !config_sets_seed(&text) {
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| SparcError::invalid(format!("{SEED_ENV}={v:?} is not an integer")))?;
        }
    }
    let bundle = build_synthetic_bundle(&cfg)?;
    write_bundle(&bundle, &a.out, a.force)?;
    Ok(String::new())
}

fn validate(a: &ValidateArgs) -> Result<String> {
    require_dir(&a.bundle)?;
    let bundle = read_bundle(&a.bundle)?;
    let violations = validate_bundle(&bundle);
    if !violations.is_empty() {
        return Err(SparcError::Validation(violations));
    }
    Ok(format!(
        "ok: {} images, {} classes, {} compound prompts\n",
        bundle.num_images(),
        bundle.num_classes(),
        bundle.compound.cols()
    ))
}

fn import(a: &ImportArgs) -> Result<String> {
    require_file(&a.scores)?;
    require_file(&a.prompts)?;
    if let Some(l) = &a.labels {
        require_file(l)?;
    }
    let bundle = import_csv(&a.scores, &a.prompts, a.labels.as_deref())?;
    write_bundle(&bundle, &a.out, a.force)?;
    Ok(String::new())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_range("2:60").unwrap(), 2..=60);
        assert!(parse_range("5:2").is_err());
        assert!(parse_range("5").is_err());
    }

    #[test]
    fn seed_key_detection() {
        assert!(config_sets_seed("classes = 3\nseed = 4\n"));
        assert!(!config_sets_seed("classes = 3 # seed = 4\n"));
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
