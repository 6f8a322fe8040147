use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: String, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("unknown persona `{name}` (valid: {valid})")]
    UnknownPersona { name: String, valid: String },

    #[error("expert `{persona}` failed to reach the goal after {attempts} attempts")]
    ExpertFailed { persona: String, attempts: usize },

    #[error("length mismatch in {context}: {left} vs {right}")]
    Length { context: String, left: usize, right: usize },

    #[error("unsupported action space: {0}")]
    UnsupportedSpace(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
            detail: detail.into(),
        }
    }
}
