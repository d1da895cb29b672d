use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A configuration value violates a domain invariant. `key` is the dotted
    /// config path of the offending field.
    #[error("invalid value for `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("operation index {0} is out of range (expected 0..=3)")]
    OpIndexOutOfRange(usize),

    #[error("the expert stage needs at least one activated expert")]
    NoActivatedExperts,

    #[error("bound classification is undefined for zero bytes and zero FLOPs")]
    UndefinedBound,

    #[error(
        "expert partition {exp_r}+{exp_m}+{exp_c} does not cover {activated} activated experts"
    )]
    PartitionMismatch {
        exp_r: usize,
        exp_m: usize,
        exp_c: usize,
        activated: usize,
    },

    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),

    #[error("throughput is undefined: {0}")]
    UndefinedThroughput(&'static str),

    #[error("no feasible plan: every candidate exceeds the VRAM budget")]
    NoFeasiblePlan,

    #[error("search space of {size} candidates exceeds the ceiling of {ceiling}")]
    SpaceTooLarge { size: u128, ceiling: u128 },

    #[error("invalid plan request: {0}")]
    InvalidRequest(String),

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("invalid stratification config: {0}")]
    InvalidStratification(String),

    #[error("task graph contains a cycle")]
    CycleDetected,

    #[error("invalid task graph: {0}")]
    InvalidTaskGraph(String),

    #[error("activation map has {map} layers but the model has {model}")]
    LayerMismatch { map: usize, model: usize },
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
