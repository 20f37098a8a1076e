use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("attention row {row} has every key masked")]
    AllKeysMasked { row: usize },

    #[error("NaN encountered in {op}")]
    NaN { op: &'static str },

    #[error("backward called on a non-scalar tensor of shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already executed on this graph; run a new forward pass")]
    DeadGraph,

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("degenerate image size {width}x{height}")]
    DegenerateImage { width: f64, height: f64 },

    #[error("box {bbox:?} lies outside a {width}x{height} image")]
    BoxOutsideImage { bbox: [f64; 4], width: f64, height: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown parameter {0:?}")]
    UnknownParam(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("data generation: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid { op, msg: msg.into() }
    }
}
