use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors shared by all modules of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An observation vector's length does not match the sensing set it is
    /// evaluated against.
    #[error("observation has {obs_len} bits but the sensing set has {subset_len} members")]
    DimensionMismatch { obs_len: usize, subset_len: usize },

    /// A numeric field violates its domain (probabilities outside (0,1),
    /// negative throughput, thresholds out of range, ...).
    #[error("{context}: {value} is outside {bounds}")]
    OutOfRange {
        context: &'static str,
        value: f64,
        bounds: &'static str,
    },

    /// Structural validation failure (mismatched lengths, empty sets,
    /// malformed configs).
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Explicit enumeration of 2^k observation vectors was requested beyond
    /// the supported cap; larger instances must go through the count-based
    /// path.
    #[error("enumeration over 2^{k} observation vectors exceeds the cap of 2^{cap}")]
    EnumerationCap { k: usize, cap: usize },

    /// A brute-force search or table build would exceed its compute or
    /// memory budget.
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),

    /// The PU throughput constraint cannot be met even with every
    /// observation mapped to the "active" decision.
    #[error("infeasible: total detection mass {u} is below alpha*gamma = {bound}")]
    Infeasible { u: f64, bound: f64 },

    /// JSON (de)serialization failure for instances or rules.
    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
