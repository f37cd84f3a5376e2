use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated data at byte offset {offset}: {what}")]
    Truncation { offset: u64, what: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("subcarrier indices are not symmetric (sum = {sum}); enable index centering to proceed")]
    Symmetry { sum: i64 },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("degenerate mask: row {row} has no valid positions")]
    DegenerateMask { row: usize },
    #[error("cannot normalize zero-norm vector ({0})")]
    Normalization(String),
    #[error("cannot build a batch from zero segments")]
    EmptyBatch,
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Numeric(_) => 4,
            _ => 3,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
