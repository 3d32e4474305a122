use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("every user or item was removed by the {0}-core filter")]
    EmptyAfterFilter(usize),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("initialization error: {0}")]
    Init(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("measurement error: {0}")]
    Measurement(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error(transparent)]
    Substrate(#[from] genrec_substrate::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
