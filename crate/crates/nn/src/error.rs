use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}`: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
