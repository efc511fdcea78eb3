use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("backward called before forward evaluation")]
    NotEvaluated,
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: usize },
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension {dim} ({name}) value {value} outside [{lo}, {hi}]")]
    OutOfRange {
        dim: usize,
        name: String,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("unknown environment '{0}'")]
    UnknownEnv(String),
    #[error("unknown policy '{policy}' for environment '{env}'")]
    UnknownPolicy { env: String, policy: String },
    #[error("environment '{0}' has no noise-free oracle")]
    NoOracle(String),
    #[error("simulator rejected the input: {0}")]
    Rejected(String),
    #[error("training aborted in round {round}: {reason}")]
    TrainingAborted { round: usize, reason: String },
    #[error("degenerate belief: {0}")]
    DegenerateBelief(String),
    #[error("certificate parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("unsupported certificate format_version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
