use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("session {session}: t_rel not strictly increasing at index {index}")]
    NonMonotonicTime { session: String, index: usize },
    #[error("session {session}: non-finite value in field `{field}` at index {index}")]
    NonFinite {
        session: String,
        index: usize,
        field: &'static str,
    },
    #[error("session {session}: first sample must have t_rel = 0, got {t0}")]
    NonZeroStart { session: String, t0: f64 },
    #[error("session {session}: t_rel must be non-negative (index {index})")]
    NegativeTime { session: String, index: usize },
    #[error("session {session}: {len} sample(s), need at least 2")]
    TooShort { session: String, len: usize },
    #[error("duplicate session id `{0}`")]
    DuplicateSessionId(String),
    #[error("unknown session id `{0}`")]
    UnknownSessionId(String),
    #[error("need at least {needed} sessions, got {got}")]
    TooFewSessions { needed: usize, got: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("test fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    EmptyInput,

    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("non-finite model input")]
    NonFiniteInput,
    #[error("environmental index set is empty")]
    EmptyIndexSet,
    #[error("feature index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("shape mismatch: expected {expected} parameters, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("empty batch")]
    EmptyBatch,
    #[error("rollout diverged at step {step}: |u| = {value} exceeds the guard")]
    DivergedRollout { step: usize, value: f64 },
    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("design matrix is singular or ill-conditioned (condition number {condition:e})")]
    SingularDesign { condition: f64 },
    #[error("need more rows than columns: {rows} rows, {cols} columns")]
    TooFewRows { rows: usize, cols: usize },
    #[error("invalid charging session at row {index}: {reason}")]
    InvalidChargingSession { index: usize, reason: String },

    #[error("profile value out of range: {field} = {value}")]
    ProfileOutOfRange { field: &'static str, value: f64 },

    #[error("unsupported checkpoint format version {0}")]
    FormatVersion(u32),
    #[error("malformed input: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error stems from invalid user input (as opposed to a
    /// failure while running an otherwise valid request).
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::DivergedRollout { .. }
                | Error::NonFiniteLoss { .. }
                | Error::NonFiniteGradient
                | Error::Io(_)
        )
    }
}
