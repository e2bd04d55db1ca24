use alloc::string::String;

/// Errors raised across the models, solvers and the closed-loop engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("topology error: {0}")]
    Topology(String),
    #[error("node {node} has no phase {phase}")]
    MissingPhase { node: usize, phase: char },
    #[error("degenerate network: {0}")]
    DegenerateNetwork(String),
    #[error("power flow did not converge in {iterations} iterations (residual {residual:e})")]
    Divergence { iterations: usize, residual: f64 },
    #[error("voltage collapse at row {0}")]
    Collapse(usize),
    #[error("unknown line {0}")]
    UnknownLine(usize),
    #[error("unknown unit `{0}`")]
    UnknownUnit(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("linearization failed for `{unit}`: {reason}")]
    Linearization { unit: String, reason: String },
    #[error("invalid region: {0}")]
    InvalidRegion(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("unsupported region operation: {0}")]
    UnsupportedRegion(&'static str),
    #[error("degenerate aggregate region: {0}")]
    DegenerateAggregate(String),
    #[error("aggregate setpoint is infeasible: {0}")]
    Infeasible(String),
    #[error("disaggregation did not converge (gap {gap:e})")]
    NotConverged { gap: f64 },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("scenario error: {0}")]
    Scenario(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
