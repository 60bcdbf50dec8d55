use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands that must share a shape do not.
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    /// A configuration or hyperparameter value outside its valid range.
    InvalidParameter { name: &'static str, reason: String },
    /// A label that is neither a valid class nor the ignore sentinel.
    LabelOutOfRange { label: u8, num_classes: usize },
    NonFinite { what: &'static str },
    /// The operation needs a class that is not present in the input.
    ClassAbsent { class_id: u8 },
    EmptyInput { what: &'static str },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                what,
                expected,
                found,
            } => write!(
                f,
                "{what}: expected {}x{}, found {}x{}",
                expected.0, expected.1, found.0, found.1
            ),
            Error::LengthMismatch {
                what,
                expected,
                found,
            } => write!(f, "{what}: expected length {expected}, found {found}"),
            Error::InvalidParameter { name, reason } => write!(f, "invalid {name}: {reason}"),
            Error::LabelOutOfRange { label, num_classes } => write!(
                f,
                "label {label} out of range for {num_classes} classes (and not ignore)"
            ),
            Error::NonFinite { what } => write!(f, "{what}: non-finite value"),
            Error::ClassAbsent { class_id } => write!(f, "class {class_id} not present"),
            Error::EmptyInput { what } => write!(f, "{what}: empty input"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
