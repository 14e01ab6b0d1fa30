use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer {layer} ({kind}): {detail}")]
    Shape {
        layer: usize,
        kind: &'static str,
        detail: String,
    },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("backward called without a cached forward pass")]
    NoForwardCache,
    #[error("label count {labels} does not match batch size {batch}")]
    LabelMismatch { labels: usize, batch: usize },
    #[error("non-finite gradient at parameter {index} (value {value})")]
    NonFiniteGradient { index: usize, value: f64 },
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {loss}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("parameter/gradient length mismatch: {params} vs {grads}")]
    LengthMismatch { params: usize, grads: usize },
    #[error("empty dataset: {0}")]
    EmptyData(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("resume state belongs to a different model spec")]
    ResumeMismatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
