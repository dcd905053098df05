use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] gmtrack::Error),
}

impl BenchError {
    /// Errors caused by bad input files or arguments rather than by a
    /// failure inside the tracker.
    pub fn is_input_error(&self) -> bool {
        match self {
            BenchError::Parse { .. } | BenchError::Format(_) | BenchError::Io(_) => true,
            BenchError::Core(e) => matches!(
                e,
                gmtrack::Error::Format(_) | gmtrack::Error::InvalidArgument(_) | gmtrack::Error::DimError { .. }
            ),
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;
