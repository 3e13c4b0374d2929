use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is singular or numerically rank deficient")]
    Singular,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("too few samples: {0}")]
    TooFewSamples(String),

    #[error("interconnection does not partition the state coordinates: {0}")]
    NotAPartition(String),

    #[error("coordinate index {index} out of range for dimension {n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("topology does not match data: {0}")]
    SpecMismatch(String),

    #[error("invalid sdp problem: {0}")]
    InvalidProblem(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("stage P infeasible for subsystem {subsystem}: best margin {margin:e}, worst block k={worst_block}")]
    InfeasibleAtStageP {
        subsystem: usize,
        margin: f64,
        worst_block: usize,
    },

    #[error("composition infeasible: certificate max eigenvalue {max_eig:e}")]
    CompositionInfeasible {
        max_eig: f64,
        /// Unit eigenvector of the most violating direction, in global coordinates.
        witness: Vec<f64>,
        /// Best multipliers found.
        mu: Vec<f64>,
    },

    #[error("composed certificate violated: max eigenvalue {max_eig:e} exceeds tolerance {tol:e}")]
    CertificateViolation { max_eig: f64, tol: f64 },

    #[error("matrix is not Hurwitz")]
    NotHurwitz,

    #[error("missing velocities: {0}")]
    MissingVelocities(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
