use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] autograd::Error),
    #[error("invalid region: {0}")]
    InvalidRegion(String),
    #[error("{op}: shape mismatch, {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("track {0} is already in a tracklet bank")]
    DuplicateAdmission(u64),
    #[error("frame {got} does not follow frame {last}")]
    OutOfOrder { last: usize, got: usize },
    #[error("malformed detection: {0}")]
    Detection(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("identity {0} is not in the memory bank")]
    MissingIdentity(i64),
    #[error("{0}")]
    Empty(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at iteration {iteration}: {what} is not finite")]
    Diverged { iteration: usize, what: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
