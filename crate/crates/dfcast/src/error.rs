use thiserror::Error;

/// Crate-wide error type. The CLI maps each variant onto a fixed exit code
/// (config 2, data 3, numeric 4) so scripted experiment grids can tell a
/// typo from a diverging run.
#[derive(Debug, Error)]
pub enum DfError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl DfError {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            DfError::Config(_) | DfError::Shape(_) => 2,
            DfError::Data(_) | DfError::Io(_) | DfError::Serde(_) => 3,
            DfError::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, DfError>;
