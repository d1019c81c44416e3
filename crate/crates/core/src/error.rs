use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("failed to load model: {0}")]
    ModelLoad(String),

    #[error("failed to load vocabulary: {0}")]
    Vocab(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error(
        "transport marginals do not balance: source mass {source_mass}, sink mass {sink_mass}"
    )]
    InfeasibleMarginals { source_mass: f64, sink_mass: f64 },

    #[error("transportation simplex did not converge after {0} pivots")]
    NoConvergence(usize),

    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("malformed table {path}: {detail}")]
    Table { path: String, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
