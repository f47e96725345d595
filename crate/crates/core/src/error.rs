use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NsiError>;

#[derive(Debug, Error)]
pub enum NsiError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("role error: {0}")]
    Role(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("standardization error: column {column} has zero variance")]
    Standardization { column: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("rank error: collinear regressors {columns:?}")]
    Rank { columns: Vec<String> },

    #[error("weak instrument: {0}")]
    WeakInstrument(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("fold {fold}, measurement {measurement}: {source}")]
    Fit {
        fold: usize,
        measurement: String,
        #[source]
        source: Box<NsiError>,
    },
}

impl NsiError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NsiError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_fit(self, fold: usize, measurement: &str) -> Self {
        NsiError::Fit {
            fold,
            measurement: measurement.to_string(),
            source: Box::new(self),
        }
    }

    /// Error with any fold/measurement labels stripped.
    pub fn root(&self) -> &NsiError {
        match self {
            NsiError::Fit { source, .. } => source.root(),
            other => other,
        }
    }

    /// Short machine-readable tag used in structured error payloads.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            NsiError::Io { .. } => "io",
            NsiError::Csv(_) => "csv",
            NsiError::Role(_) => "role",
            NsiError::Validation(_) => "validation",
            NsiError::DegenerateData(_) => "degenerate_data",
            NsiError::InsufficientData(_) => "insufficient_data",
            NsiError::Standardization { .. } => "standardization",
            NsiError::DimensionMismatch { .. } => "dimension_mismatch",
            NsiError::Numerical(_) => "numerical",
            NsiError::Rank { .. } => "rank",
            NsiError::WeakInstrument(_) => "weak_instrument",
            NsiError::InvalidArgument(_) => "invalid_argument",
            NsiError::Config(_) => "config",
            NsiError::Schema(_) => "schema",
            NsiError::Fit { .. } => unreachable!(),
        }
    }

    /// Process exit code: 1 internal/numerical, 2 user/config, 3 data validation.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            NsiError::Io { .. }
            | NsiError::Role(_)
            | NsiError::InvalidArgument(_)
            | NsiError::Config(_)
            | NsiError::Schema(_) => 2,
            NsiError::Csv(_)
            | NsiError::Validation(_)
            | NsiError::DegenerateData(_)
            | NsiError::InsufficientData(_)
            | NsiError::Standardization { .. } => 3,
            _ => 1,
        }
    }
}
