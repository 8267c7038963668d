use thiserror::Error;

/// Errors surfaced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the named primitive.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Input outside the documented domain of a primitive (e.g. log of a
    /// non-positive value).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A caller-facing contract was violated (non-scalar backward root,
    /// reused tape, empty snippet set, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Token sequence does not fit the model context window.
    #[error("context overflow: sequence of {len} tokens exceeds context_len {context_len}{detail}")]
    ContextOverflow {
        len: usize,
        context_len: usize,
        detail: String,
    },

    /// Lookup of an id that is not present (snippet ids, parameter names).
    #[error("not found: {0}")]
    NotFound(String),

    /// Empty text where at least one token was required.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A gradient became non-finite during optimization.
    #[error("non-finite gradient at step {step} in parameter {param}")]
    NonFiniteGradient { step: usize, param: String },

    /// Two checkpoints that must share a configuration do not.
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    /// Malformed file contents (checkpoint, vocabulary, dataset).
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
