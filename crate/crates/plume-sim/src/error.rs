use thiserror::Error;

#[derive(Error, Debug)]
pub enum SimError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("CFL violation: dt_solver {dt} s exceeds stable bound {dt_max} s")]
    CflViolation { dt: f64, dt_max: f64 },

    #[error("numerical failure at step {step}: {detail}")]
    Numerical { step: usize, detail: String },

    #[error("wind projection failed to converge: residual {residual:.3e} (tolerance {tolerance:.3e})")]
    ProjectionFailed { residual: f64, tolerance: f64 },
}

impl SimError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        SimError::InvalidArgument(msg.into())
    }
}
