use thiserror::Error;

/// Errors raised anywhere in the solver stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate domain: {0}")]
    DegenerateDomain(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("cell ({i}, {j}) is not cut by the interface")]
    NotACutCell { i: usize, j: usize },

    #[error("cell ({i}, {j}) is crossed {crossings} times; a single chord per cell is required")]
    MultipleCrossings { i: usize, j: usize, crossings: usize },

    #[error("empty domain: no active nodes")]
    EmptyDomain,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    #[error("non-finite data: {0}")]
    NonFinite(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("formulation mismatch: expected {expected}, got {got}")]
    FormulationMismatch { expected: String, got: String },

    #[error("stage {stage} failed: {source}")]
    StageFailure {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown scheme `{0}` (valid: I1, I2, I3, I4, I5, I6, split)")]
    UnknownScheme(String),

    #[error("internal solver error: {0}")]
    Solver(String),
}

pub type Result<T> = std::result::Result<T, Error>;
