use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid block configuration: {0}")]
    Config(String),

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("flop count overflows 64 bits")]
    Overflow,

    #[error("search direction is not an ascent direction (slope {0})")]
    Direction(f64),

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("reduce plan error: {0}")]
    Plan(String),

    #[error("worker {worker} (rows {start}..{end}) failed: {reason}")]
    Worker {
        worker: usize,
        start: usize,
        end: usize,
        reason: String,
    },

    #[error("checksum mismatch at worker {0} after retransmission")]
    Checksum(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
