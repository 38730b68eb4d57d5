//! Unified error type for the registration toolkit.
//!
//! Variants group into the three failure classes surfaced by the command-line
//! tool: caller mistakes (`Shape`, `Usage`, `Domain`, `Config`), bad input
//! data (`Format`, `Data`, `Io`), and numeric aborts (`NonFinite`).

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Tensor or image dimensions disagree.
    Shape(String),
    /// An API was invoked in an unsupported way.
    Usage(String),
    /// A numeric argument lies outside its valid domain.
    Domain(String),
    /// An invalid configuration value.
    Config(String),
    /// A file does not match its declared format.
    Format(String),
    /// Dataset-level inconsistency (counts, pairing, empty masks).
    Data(String),
    /// A non-finite value surfaced where finite arithmetic is required.
    NonFinite(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_includes_class_and_message() {
        let e = Error::Shape("got 3 channels, kernel expects 2".into());
        let s = e.to_string();
        assert!(s.starts_with("shape error:"));
        assert!(s.contains("kernel expects 2"));
    }

    #[test]
    fn io_errors_convert_and_expose_source() {
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "missing");
        let e: Error = io.into();
        assert!(matches!(e, Error::Io(_)));
        assert!(std::error::Error::source(&e).is_some());
    }
}
