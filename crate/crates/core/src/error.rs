use thiserror::Error;

/// Errors raised anywhere in the identification / certification / control pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("unstable matrix: spectral radius {rho} >= 1")]
    Unstable { rho: f64 },

    #[error("singular linear system")]
    Singular,

    #[error("training failed: {0}")]
    Training(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("domain violation: {0}")]
    Domain(String),

    #[error("physical violation: {0}")]
    Physical(String),

    #[error("unphysical plant state: {0}")]
    Unphysical(String),

    #[error("observer gain selection failed: {0}")]
    GainSelection(String),

    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("infeasible reference: {0}")]
    InfeasibleReference(String),

    #[error("reference calculator did not converge: {0}")]
    NoConvergence(String),

    #[error("infeasible set-point: output {output}, {side} side (margin {margin:.3e})")]
    InfeasibleSetpoint {
        output: usize,
        side: &'static str,
        margin: f64,
    },

    #[error("feasibility lost at FHOCP: {0}")]
    FeasibilityLoss(String),

    #[error("invariant breach at step {step}: {what}")]
    Invariant {
        step: usize,
        what: String,
        snapshot: String,
    },

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
