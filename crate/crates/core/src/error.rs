use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: {message}")]
    BadCell {
        row: usize,
        column: String,
        message: String,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("objective is not finite at {0}")]
    NonFiniteObjective(String),

    #[error("singular linear system: {0}")]
    SingularSystem(String),

    #[error("rank deficient matrix: {0}")]
    RankDeficient(String),

    #[error("optimization failed: {0}")]
    OptimizationFailed(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the inputs rather than by the numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::InvalidData(_)
                | Error::MissingColumn(_)
                | Error::BadCell { .. }
                | Error::DimensionMismatch(_)
                | Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
