use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("value {0} is not admissible (NaN and +inf are forbidden)")]
    NonAdmissible(f64),

    #[error("residuation onto atom {atom} is unbounded: no finite value to compare against")]
    UnboundedResiduation { atom: usize },

    #[error("state {state} is not covered by any atom")]
    UncoveredState { state: usize },

    #[error("state {state} has no outgoing edge")]
    NoOutgoingEdge { state: usize },

    #[error("edge ({source_state}, {target}) references a state outside 0..{state_count}")]
    StateOutOfRange {
        source_state: usize,
        target: usize,
        state_count: usize,
    },

    #[error("discount factor must lie in [0, 1), got {0}")]
    InvalidDiscount(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        last_iterate: Vec<f64>,
    },

    #[error("cell {cell} cannot be split along any dimension")]
    Unsplittable { cell: usize },

    #[error("candidate pool is empty")]
    EmptyPool,

    #[error("atom requires grid coordinates but none were supplied")]
    MissingGrid,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
        if expected == found {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                what,
                expected,
                found,
            })
        }
    }
}
