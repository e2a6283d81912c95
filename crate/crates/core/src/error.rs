use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("parameter `{name}` = {value} violates {constraint}")]
    ParamOutOfRange {
        name: &'static str,
        value: f64,
        constraint: &'static str,
    },

    #[error("cost of a zero-size intervention is undefined")]
    ZeroJump,

    #[error("{what}: argument {x} outside the domain")]
    Domain { what: &'static str, x: f64 },

    #[error("{what}: argument {x} outside the admissible range (upper limit {limit})")]
    OutOfRange {
        what: &'static str,
        x: f64,
        limit: f64,
    },

    #[error("singular pasting system (determinant {det})")]
    SingularSystem { det: f64 },

    #[error("{what}: no convergence after {iterations} iterations, bracket [{lo}, {hi}]")]
    ConvergenceFailure {
        what: &'static str,
        iterations: usize,
        lo: f64,
        hi: f64,
    },

    #[error("finite-difference iteration stalled after {iterations} sweeps, last change {residual:e}")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("inadmissible band policy: {0}")]
    InadmissiblePolicy(String),
}
