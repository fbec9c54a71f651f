//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Matrix shapes incompatible for the named operation.
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// An operation received an empty input it cannot handle.
    EmptyInput(&'static str),
    /// A row had zero norm where a cosine similarity was required.
    ZeroNormRow { index: usize },
    /// ClsTopN selection requires a Cls token in the sequence.
    MissingCls,
    /// Power iteration failed to converge; carries the last estimate.
    PowerIterationDiverged { last: f64, iters: usize },
    /// A configuration violated one of its invariants.
    InvalidConfig(String),
    /// An experiment stage failed; names the stage for diagnostics.
    Stage {
        stage: &'static str,
        source: Box<Error>,
    },
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl Error {
    pub fn stage(stage: &'static str, source: Error) -> Self {
        Error::Stage {
            stage,
            source: Box::new(source),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: incompatible shapes {}x{} and {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::EmptyInput(op) => write!(f, "{op}: empty input"),
            Error::ZeroNormRow { index } => {
                write!(f, "row {index} has zero norm; cosine similarity undefined")
            }
            Error::MissingCls => write!(f, "ClsTopN selection requires a Cls token"),
            Error::PowerIterationDiverged { last, iters } => write!(
                f,
                "power iteration did not converge after {iters} iterations (last estimate {last})"
            ),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::Stage { stage, source } => write!(f, "stage `{stage}` failed: {source}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Stage { source, .. } => Some(source),
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
