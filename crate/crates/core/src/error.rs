use thiserror::Error;

/// Errors raised by every stage of the ensemble.
#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("transform build failed: {0}")]
    TransformBuild(String),

    #[error("feature `{feature}` has zero variance (all counts zero)")]
    ZeroVarianceFeature { feature: String },

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("matrix is not positive definite{0}; apply psd_repair first")]
    NotPositiveDefinite(String),

    #[error("study {study}: quadratic form v'Sv = {value:e} is not positive")]
    Indefinite { study: usize, value: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("{method} did not converge: {detail}")]
    Convergence { method: &'static str, detail: String },

    #[error("optimization failure in {method}: {detail}")]
    Optimization { method: &'static str, detail: String },

    #[error("MSFA failed on all {restarts} restarts")]
    MsfaFailed {
        restarts: usize,
        traces: Vec<Vec<f64>>,
    },

    #[error("rank error: {0}")]
    Rank(String),

    #[error("parse error at row {row}, column {column}: {detail}")]
    Parse {
        row: usize,
        column: usize,
        detail: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("feature map does not cover: {}", .0.join(", "))]
    Coverage(Vec<String>),

    #[error("harmonization failed: {0}")]
    Harmonize(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error category, used by the CLI for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Convergence,
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Convergence { .. } | Error::Optimization { .. } | Error::MsfaFailed { .. } => {
                ErrorKind::Convergence
            }
            Error::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }
}
