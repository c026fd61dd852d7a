use thiserror::Error;

/// Errors raised by the docking pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("bad joint vector length: expected {expected}, got {got}")]
    BadJointVectorLength { expected: usize, got: usize },

    #[error("direction not normalized (norm {norm})")]
    DirectionNotNormalized { norm: f64 },

    #[error("cost term index {0} out of range 1..=5")]
    CostIndexOutOfRange(usize),

    #[error("subproblem not convex (smallest eigenvalue {min_eigenvalue:e})")]
    SubproblemNotConvex { min_eigenvalue: f64 },

    #[error("invalid initial state: {0}")]
    InvalidInitialState(String),

    #[error("force unobservable at this configuration")]
    ForceUnobservable,

    #[error("infeasible command: joint {joint} at {value} outside [{lower}, {upper}]")]
    InfeasibleCommand {
        joint: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty series")]
    EmptySeries,

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::BadJointVectorLength { expected, got })
    }
}
