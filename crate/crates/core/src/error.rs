use crate::pattern::Pattern;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("degenerate geometry: AP {ap} and UE group {group} are co-located")]
    DegenerateGeometry { ap: usize, group: usize },

    #[error("pattern space too large: {n} APs exceeds the limit of {limit}")]
    PatternSpaceTooLarge { n: usize, limit: usize },

    #[error("unstable queue {queue}: utilization {rho} >= 1")]
    UnstableQueue { queue: usize, rho: f64 },

    #[error("zero service rate for queue {queue} under busy set {set}")]
    ZeroServiceRate { queue: usize, set: Pattern },

    #[error("degenerate utilization for queue {queue}: positive load with zero utilization")]
    DegenerateUtilization { queue: usize },

    #[error("non-contractive start: coordinate {index} has start {start} < image {image}")]
    NonContractiveStart { index: usize, start: f64, image: f64 },

    #[error("fixed-point iteration did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize, last: Vec<f64> },

    #[error("server {ap} lacks pattern {pattern}")]
    ServerLacksPattern { ap: usize, pattern: Pattern },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("numerical stall: {0}")]
    NumericalStall(String),

    #[error("saturated: queue {queue} exceeded {limit} packets")]
    Saturated { queue: usize, limit: usize },

    #[error("association mismatch: {0}")]
    AssociationMismatch(String),

    #[error("invalid allocation: {0}")]
    InvalidAllocation(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
