use std::path::PathBuf;

use crate::model::Violation;

pub type Result<T, E = SparcError> = std::result::Result<T, E>;

/// Which axis a degenerate standardization happened on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Row,
    Column,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Axis::Row => f.write_str("row"),
            Axis::Column => f.write_str("column"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SparcError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("bundle failed validation: {}", format_violations(.0))]
    Validation(Vec<Violation>),

    #[error("unsupported format_version {found} (reader supports <= {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("dimension mismatch in {file}: expected {expected} bytes, found {actual}")]
    DimensionMismatch {
        file: String,
        expected: u64,
        actual: u64,
    },

    #[error("missing blob {0}")]
    MissingBlob(PathBuf),

    #[error("refusing to overwrite existing bundle at {0} (use force)")]
    AlreadyExists(PathBuf),

    #[error(
        "degenerate distribution in {matrix} {axis} {index}: standard deviation {sd:e} below floor"
    )]
    DegenerateDistribution {
        matrix: String,
        axis: Axis,
        index: usize,
        sd: f64,
    },

    #[error("covariance matrix is zero to within 1e-12")]
    DegenerateCovariance,

    #[error("no compound prompt mentions class {0}")]
    NoCompoundPrompts(usize),

    #[error("rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("average precision undefined: no positive labels")]
    UndefinedAp,

    #[error("missing parameter for noise model: {0}")]
    MissingParameter(String),

    #[error("scores have zero variance")]
    ZeroVariance,

    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),
}

impl SparcError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SparcError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        SparcError::InvalidInput(msg.into())
    }

    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn code(&self) -> &'static str {
        match self {
            SparcError::Io { .. } => "io",
            SparcError::Manifest(_) => "manifest",
            SparcError::Csv(_) => "csv",
            SparcError::InvalidInput(_) => "invalid_input",
            SparcError::Validation(_) => "validation",
            SparcError::UnsupportedVersion { .. } => "unsupported_version",
            SparcError::DimensionMismatch { .. } => "dimension_mismatch",
            SparcError::MissingBlob(_) => "missing_blob",
            SparcError::AlreadyExists(_) => "already_exists",
            SparcError::DegenerateDistribution { .. } => "degenerate_distribution",
            SparcError::DegenerateCovariance => "degenerate_covariance",
            SparcError::NoCompoundPrompts(_) => "no_compound_prompts",
            SparcError::RankOutOfRange { .. } => "rank_out_of_range",
            SparcError::LengthMismatch { .. } => "length_mismatch",
            SparcError::UndefinedAp => "undefined_ap",
            SparcError::MissingParameter(_) => "missing_parameter",
            SparcError::ZeroVariance => "zero_variance",
            SparcError::HypothesisViolated(_) => "hypothesis_violated",
        }
    }
}

impl From<csv::Error> for SparcError {
    fn from(e: csv::Error) -> Self {
        SparcError::Csv(e.to_string())
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}
