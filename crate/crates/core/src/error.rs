use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("degenerate vector: norm {norm:e} does not exceed {floor:e}")]
    DegenerateVector { norm: f64, floor: f64 },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("partition infeasible: class {class} has {available} samples but {needed} are required")]
    PartitionInfeasible {
        class: usize,
        available: usize,
        needed: usize,
    },

    #[error("invalid parameter `{name}`: must satisfy {constraint}")]
    Parameter {
        name: String,
        constraint: String,
    },

    #[error("cluster {cluster} has no members among the scored samples")]
    ClusterCoverage { cluster: usize },

    #[error("training diverged (non-finite loss) at round {round}, client {client}, batch {batch}")]
    DivergenceFailure {
        round: usize,
        client: usize,
        batch: usize,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("dataset format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: impl Into<String>, constraint: impl Into<String>) -> Self {
        Error::Parameter {
            name: name.into(),
            constraint: constraint.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
