use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] forge_autodiff::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("metadata json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("checkpoint was written for spec {found}, expected {expected}")]
    SpecMismatch { expected: String, found: String },
    #[error("unauthorized: no passport supplied for passport site {0}")]
    MissingPassport(usize),
    #[error("refusing input containing passport material: tensor `{0}`")]
    PassportLeak(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f32 },
    #[error("dataset: {0}")]
    Data(String),
    #[error("config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format { what, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
