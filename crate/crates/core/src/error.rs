use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} does not match {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("function is not deterministic: {0}")]
    NonDeterministic(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("object label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error ({context}): {msg}")]
    Format { context: String, msg: String },

    #[error("checksum mismatch ({context})")]
    Checksum { context: String },

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("incompatible parameters: {0}")]
    Incompatible(String),

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(context: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            msg: msg.into(),
        }
    }
}
