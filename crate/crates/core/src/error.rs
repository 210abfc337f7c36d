use std::path::PathBuf;

/// Errors produced by the library and the command-line front end.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("not a simplex point: {reason}")]
    NotASimplexPoint { reason: String },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("empty input")]
    EmptyInput,

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("weight {index} must be strictly positive, got {value}")]
    NonPositiveWeight { index: usize, value: f64 },

    #[error("negative entry {value} at ({row}, {col})")]
    NegativeEntry { row: usize, col: usize, value: f64 },

    #[error("non-finite cost {value} at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize, value: f64 },

    #[error("degenerate marginal: {0}")]
    DegenerateMarginal(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("covariance is not positive definite")]
    NonPositiveDefiniteCovariance,

    #[error("component {component} is empty (column mass {mass:e}){}", sweep_suffix(*.sweep))]
    EmptyComponent {
        component: usize,
        mass: f64,
        sweep: Option<usize>,
    },

    #[error("invalid coupling: {0}")]
    InvalidCoupling(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid settings: {0}")]
    InvalidSettings(String),

    #[error("need at least {k} points to fit {k} components, got {n}")]
    TooFewPoints { n: usize, k: usize },

    #[error("{}: parse error at row {row}, column {column} ({value:?}): {message}", .path.display())]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
        message: String,
    },

    #[error("{}: row {row} has {found} fields, expected {expected}", .path.display())]
    RaggedRow {
        path: PathBuf,
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("unsupported schema_version {found:?} (expected {expected:?})")]
    SchemaVersionMismatch { found: String, expected: String },

    #[error("document violates model invariants: {0}")]
    InvariantViolation(String),

    #[error("malformed document: {0}")]
    Document(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn sweep_suffix(sweep: Option<usize>) -> String {
    match sweep {
        Some(s) => format!(" during sweep {s}"),
        None => String::new(),
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
