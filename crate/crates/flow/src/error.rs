use ffe_autodiff::AutodiffError;
use ffe_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value in {stage} at iteration {iteration}")]
    NonFinite {
        stage: &'static str,
        iteration: usize,
    },
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },
    #[error("subset of fraction {fraction} over {total} samples is empty")]
    EmptySubset { fraction: f64, total: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = FlowError> = std::result::Result<T, E>;
