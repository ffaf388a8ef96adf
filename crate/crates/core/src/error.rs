use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by kernels, layers and model construction.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible.
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A configuration value violates an invariant.
    Config { field: &'static str, reason: String },
    /// The skeleton graph is invalid.
    Graph(String),
    /// A scalar objective produced a non-finite value.
    Evaluation { context: String },
    /// A class label is outside `[0, n_classes)`.
    Label { label: usize, n_classes: usize },
    /// A named parameter or buffer does not exist.
    UnknownParam(String),
}

impl Error {
    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::Config { field, reason } => write!(f, "invalid configuration `{field}`: {reason}"),
            Error::Graph(msg) => write!(f, "invalid skeleton graph: {msg}"),
            Error::Evaluation { context } => write!(f, "non-finite objective value ({context})"),
            Error::Label { label, n_classes } => {
                write!(f, "label {label} out of range for {n_classes} classes")
            }
            Error::UnknownParam(name) => write!(f, "unknown parameter `{name}`"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T, E = Error> = core::result::Result<T, E>;
