use thiserror::Error;

#[derive(Error, Debug)]
pub enum NnError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("construction failure at stage {stage}: {detail}")]
    Construction { stage: String, detail: String },

    #[error("training aborted at epoch {epoch}, step {step}: non-finite loss")]
    NanLoss { epoch: usize, step: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Core(#[from] plume_core::CoreError),
}

impl NnError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        NnError::InvalidArgument(msg.into())
    }

    pub fn construction(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        NnError::Construction {
            stage: stage.into(),
            detail: detail.into(),
        }
    }
}
