use alloc::string::String;

pub type Result<T, E = ProsError> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProsError {
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    Shape { what: &'static str, expected: usize, actual: usize },

    #[error("{what} index {index} out of range (size {size})")]
    IndexOutOfRange { what: &'static str, index: usize, size: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("expected a {expected} mask, got a {actual} mask")]
    MaskMode { expected: &'static str, actual: &'static str },

    #[error("non-finite activations in {component} at layer {layer}")]
    NonFinite { component: &'static str, layer: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("duplicate {what}: {name}")]
    Duplicate { what: &'static str, name: String },

    #[error("sequence of {len} tokens exceeds the context length {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("precondition failed: {0}")]
    Precondition(String),
}

impl ProsError {
    /// True for failures caused by NaN/inf values rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, ProsError::NonFinite { .. } | ProsError::NonFiniteLoss { .. })
    }
}
