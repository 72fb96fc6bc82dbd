use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("numeric error: non-finite value in {op}{}", context.as_deref().map(|c| format!(" ({c})")).unwrap_or_default())]
    NonFinite {
        op: &'static str,
        context: Option<String>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("oracle error: {0}")]
    Oracle(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn non_finite(op: &'static str) -> Self {
        Error::NonFinite { op, context: None }
    }
}
