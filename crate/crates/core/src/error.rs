use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the engine, generators, and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("softmax row {row} is entirely masked (self-loops missing upstream)")]
    AllMaskedRow { row: usize },

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("recurrence step {t} outside table range 1..={t_max}")]
    StepOutOfRange { t: usize, t_max: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("tokenization failed: unknown token `{0}`")]
    UnknownToken(String),

    #[error("infeasible generator parameters: {0}")]
    InfeasibleParams(String),

    #[error("generator contract violated: {0}")]
    GeneratorContract(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted at step {step} (T={t}): {detail}")]
    TrainAborted {
        step: usize,
        t: usize,
        detail: String,
    },

    #[error("empty report grid")]
    EmptyGrid,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
