use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid mask: at least one position must be unmasked")]
    InvalidMask,
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value in {what} at coordinate {index}")]
    Numeric { what: String, index: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },
    #[error("context has {found} utterances, at least 2 are required")]
    ContextTooShort { found: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("incompatible configuration: {0}")]
    Compatibility(String),
    #[error("invalid UTF-8 on line {line}")]
    Encoding { line: usize },
    #[error("example {index}: {source}")]
    Example {
        index: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
    #[error("batch {batch}: {source}")]
    Batch {
        batch: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn dimension(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn in_example(self, index: usize) -> Self {
        Error::Example {
            index,
            source: alloc::boxed::Box::new(self),
        }
    }

    pub fn in_batch(self, batch: usize) -> Self {
        Error::Batch {
            batch,
            source: alloc::boxed::Box::new(self),
        }
    }

    /// True for errors caused by non-finite arithmetic, possibly wrapped in a batch error.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Numeric { .. } => true,
            Error::Batch { source, .. } | Error::Example { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
