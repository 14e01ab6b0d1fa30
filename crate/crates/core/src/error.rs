use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid waveform parameters: {0}")]
    InvalidWaveform(String),
    #[error("invalid channel parameters: {0}")]
    InvalidChannel(String),
    #[error("invalid dataset spec: {0}")]
    InvalidDataset(String),
    #[error("stream selection: asked for {requested} streams but only {available} exist")]
    StreamSelection { requested: usize, available: usize },
    #[error("window of {window} samples exceeds stream length {length}; no inputs")]
    EmptyWindows { window: usize, length: usize },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no feasible configuration after {attempts} draws; failures by axis: {axes}")]
    SamplingExhausted { attempts: usize, axes: String },
    #[error("every trial failed in round with budget {budget}")]
    AllTrialsFailed { budget: usize },
    #[error("invalid search settings: {0}")]
    InvalidSearch(String),
    #[error("format error in {what}: {detail}")]
    Format { what: String, detail: String },
    #[error("dataset hash mismatch: manifest {expected}, content {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error(transparent)]
    Nn(#[from] iqband_nn::NnError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
