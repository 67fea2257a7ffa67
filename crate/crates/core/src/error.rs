use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("fully masked row {row}: no key is visible")]
    FullyMaskedRow { row: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("decay factor must exceed 1 (got {0})")]
    DecayFactor(usize),

    #[error("memory bank: {0}")]
    MemoryBank(String),

    #[error("sampler diverged at step {step}")]
    Diverged { step: usize },

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("frozen parameters changed: {0}")]
    FrozenChanged(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("no evaluated story produced two frames")]
    NoMultiFrameRollout,

    #[error("render map is rank deficient")]
    RankDeficient,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
