use thiserror::Error;

/// Errors produced by the simulation kernel, estimators and environments.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot schedule event at t={time} before clock t={clock}")]
    SchedulingInPast { time: f64, clock: f64 },

    #[error("event queue exhausted")]
    QueueExhausted,

    #[error("invalid simulation time {0}")]
    InvalidTime(f64),

    /// An argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller violated an interface contract (lengths, indices, ordering).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Reward impulses or segments that fall outside the macro-action they are settled into.
    #[error("inconsistent reward accounting: {0}")]
    Consistency(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Internal environment invariant broken, always a bug.
    #[error("simulation invariant violated: {0}")]
    Simulation(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
