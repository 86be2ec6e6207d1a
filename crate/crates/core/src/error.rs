use thiserror::Error;

pub type Result<T> = std::result::Result<T, LampError>;

#[derive(Debug, Error)]
pub enum LampError {
    #[error(transparent)]
    Tensor(#[from] gradcore::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape contract violated: {0}")]
    Contract(String),
    #[error("non-finite value at step {step}: {what}")]
    Numeric { step: usize, what: String },
    #[error("projection failed for keypoint {keypoint} in frame {frame}: depth {depth}")]
    Projection { keypoint: usize, frame: usize, depth: f64 },
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },
    #[error("freeze contract broken for {component}: {before:#x} -> {after:#x}")]
    FrozenDrift { component: String, before: u64, after: u64 },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LampError {
    pub fn config(msg: impl Into<String>) -> Self {
        LampError::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        LampError::Format(msg.into())
    }
}
