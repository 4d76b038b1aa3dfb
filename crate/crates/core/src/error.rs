//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced while loading inputs, validating configuration, or
/// running a simulation.
#[derive(Debug, Error)]
pub enum SimError {
    /// Scenario or profile configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// A trace record failed to parse.
    #[error("trace parse error at line {line}: {message}")]
    TraceParse { line: usize, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A runtime invariant was violated mid-run. Always a bug or a broken
    /// scenario; the engine aborts rather than producing a bogus report.
    #[error("invariant breach at t={time:.6}: {message}")]
    InvariantBreach { time: f64, message: String },

    /// No instance has headroom for the adapter being registered.
    #[error("no placement capacity for adapter {0}")]
    AdapterPlacement(String),

    /// A plan or fault references a GPU type that is not in the fleet.
    #[error("unknown gpu type: {0}")]
    UnknownGpuType(String),

    /// A demand bucket cannot be served by any GPU type.
    #[error("infeasible: bucket (in={0}, out={1}) has demand but zero capacity on every gpu type")]
    InfeasibleBucket(usize, usize),

    /// The optimizer search space is exhausted without a feasible plan.
    #[error("infeasible: no replica count vector within bounds can serve the demand")]
    InfeasiblePlan,

    #[error("empty sample set has no percentile")]
    EmptySamples,

    /// Reports being compared do not share a schema.
    #[error("report schema mismatch: {0}")]
    SchemaMismatch(String),
}

impl SimError {
    pub fn config(msg: impl Into<String>) -> Self {
        SimError::Config(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.into(),
            source,
        }
    }
}
