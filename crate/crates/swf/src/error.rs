use thiserror::Error;

/// Errors raised by the numerical kernels and samplers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SwfError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("series did not converge: {0}")]
    NonConvergence(String),
    #[error("tolerance {tol:e} unreachable: {detail}")]
    TolUnreachable { tol: f64, detail: String },
    #[error("clock is not admissible for the alternating-series sampler: {0}")]
    Inadmissible(String),
    #[error("iteration cap of {cap} reached in {context}")]
    IterationCap { cap: u64, context: String },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("negative weight {value:e} at {context}")]
    NegativeWeight { value: f64, context: String },
    #[error("rejection sampler exhausted after {attempts} attempts")]
    Exhausted { attempts: u64 },
    #[error("degenerate importance weights: effective sample size {ess:.3} below floor {floor}")]
    Degenerate { ess: f64, floor: f64 },
}

impl SwfError {
    /// True for failures of a numerical routine (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            SwfError::NonConvergence(_)
                | SwfError::TolUnreachable { .. }
                | SwfError::IterationCap { .. }
                | SwfError::NegativeWeight { .. }
                | SwfError::Exhausted { .. }
                | SwfError::Degenerate { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, SwfError>;
