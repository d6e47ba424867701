use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// Variants fall into two classes: input problems (schema, parse,
/// validation, precondition, configuration) and runtime failures (I/O,
/// kernel coverage, degenerate statistics). [`Error::is_input_error`]
/// tells them apart; the CLI maps the classes to exit codes 1 and 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("covariance error: {0}")]
    Covariance(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by bad input or configuration rather than
    /// by a failure while computing.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Schema(_)
            | Error::Parse { .. }
            | Error::Validation(_)
            | Error::Alignment(_)
            | Error::Precondition(_)
            | Error::Config(_)
            | Error::Unsupported(_) => true,
            Error::Csv(e) => !e.is_io_error(),
            Error::Json(e) => !e.is_io(),
            Error::Coverage(_) | Error::Degenerate(_) | Error::Covariance(_) | Error::Io(_) => false,
        }
    }

    /// Short machine-readable category name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Schema(_) => "schema",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Alignment(_) => "alignment",
            Error::Precondition(_) => "precondition",
            Error::Config(_) => "config",
            Error::Unsupported(_) => "unsupported",
            Error::Coverage(_) => "coverage",
            Error::Degenerate(_) => "degenerate",
            Error::Covariance(_) => "covariance",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
