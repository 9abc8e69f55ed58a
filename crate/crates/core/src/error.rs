use thiserror::Error;

pub type Result<T> = std::result::Result<T, ApcdError>;

#[derive(Debug, Error)]
pub enum ApcdError {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("emission covariance is not invertible{}", at_step(*t))]
    SingularEmission { t: Option<usize> },

    #[error("S^-1 + Quu is not positive definite{} (indefinite Q-function)", at_step(*t))]
    IndefiniteQ { t: Option<usize> },

    #[error("prior policy covariance is not positive definite{}", at_step(*t))]
    SingularPolicy { t: Option<usize> },

    #[error("degenerate value propagation (I + Vxx*Qcov singular){}", at_step(*t))]
    DegeneratePropagation { t: Option<usize> },

    #[error("mixture weight marginal covariance is not positive definite (component {n}, t={t})")]
    SingularWeightMarginal { n: usize, t: usize },

    #[error("innovation covariance is not positive definite at t={t}")]
    DegenerateEmission { t: usize },

    #[error("predicted state covariance is singular at t={t}")]
    DegenerateTransition { t: usize },

    #[error("joint covariance is not positive definite after regularization")]
    IllPosedJoint,

    #[error("risk-sensitivity breakdown at t={t}: I - lambda*Qcov*P lost positive definiteness")]
    RiskBreakdown { t: usize },

    #[error("regulator control Hessian is not positive definite at t={t}")]
    SingularControlHessian { t: usize },

    #[error("closed loop diverged: non-finite state at step {t}")]
    Diverged { t: usize },

    #[error("unknown {kind} '{name}'")]
    Unknown { kind: &'static str, name: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{context}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn at_step(t: Option<usize>) -> String {
    t.map(|t| format!(" at t={t}")).unwrap_or_default()
}

impl ApcdError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        ApcdError::Io {
            context: context.into(),
            source,
        }
    }

    /// Attaches a time index to step-local errors raised without one.
    pub fn at(self, step: usize) -> Self {
        match self {
            ApcdError::SingularEmission { t: None } => ApcdError::SingularEmission { t: Some(step) },
            ApcdError::IndefiniteQ { t: None } => ApcdError::IndefiniteQ { t: Some(step) },
            ApcdError::SingularPolicy { t: None } => ApcdError::SingularPolicy { t: Some(step) },
            ApcdError::DegeneratePropagation { t: None } => {
                ApcdError::DegeneratePropagation { t: Some(step) }
            }
            other => other,
        }
    }

    /// True for failures caused by the numbers rather than by malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            ApcdError::SingularEmission { .. }
                | ApcdError::IndefiniteQ { .. }
                | ApcdError::SingularPolicy { .. }
                | ApcdError::DegeneratePropagation { .. }
                | ApcdError::DegenerateEmission { .. }
                | ApcdError::DegenerateTransition { .. }
                | ApcdError::IllPosedJoint
                | ApcdError::RiskBreakdown { .. }
                | ApcdError::SingularControlHessian { .. }
                | ApcdError::SingularWeightMarginal { .. }
                | ApcdError::Diverged { .. }
        )
    }
}
