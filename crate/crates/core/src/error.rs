use thiserror::Error;

pub type Result<T> = std::result::Result<T, MmoError>;

#[derive(Debug, Error)]
pub enum MmoError {
    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("line {line}: {reason}")]
    BadRow { line: usize, reason: String },

    #[error("{bad} of {total} rows rejected (limit {limit:.1}%); first: {first}")]
    TooManyBadRows {
        bad: usize,
        total: usize,
        limit: f64,
        first: String,
    },

    #[error("filter produced no tokens")]
    EmptyResult,

    #[error("invalid filter: {0}")]
    InvalidFilter(String),

    #[error("speaker `{0}` has too few tokens or zero formant variance")]
    DegenerateSpeaker(String),

    #[error("unknown speaker `{0}`")]
    UnknownSpeaker(String),

    #[error("level `{level}` of factor `{factor}` is absent")]
    MissingLevel { factor: String, level: String },

    #[error("singular system in block `{0}`")]
    SingularSystem(String),

    #[error("optimizer did not converge after {iterations} iterations (gradient norm {gradient_norm:.3e})")]
    NotConverged {
        iterations: usize,
        gradient_norm: f64,
    },

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("covariance matrix is not positive definite")]
    SingularCovariance,

    #[error("scatter matrix is singular")]
    SingularScatter,

    #[error("speaker `{speaker}` has fewer than 2 tokens in cell {cell}")]
    InsufficientTokens { speaker: String, cell: String },

    #[error("{failed} of {total} replicates failed: {first}")]
    ReplicateFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
