use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{file}: expected {expected} bytes, found {found}")]
    ChecksumMismatch { file: String, expected: u64, found: u64 },
    #[error("network error: {0}")]
    Network(String),
    #[error("cluster-to-digit assignment is ambiguous: {0}")]
    AmbiguousAssignment(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("missing prerequisite: {0}")]
    MissingStage(String),
    #[error(transparent)]
    Core(conceptvae::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<conceptvae::Error> for CliError {
    fn from(e: conceptvae::Error) -> Self {
        use conceptvae::Error as E;
        match e {
            E::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            E::InvalidConfig(_) | E::InvalidArgument(_) => CliError::Config(e.to_string()),
            E::BadMagic { .. }
            | E::TruncatedPayload { .. }
            | E::BadDims { .. }
            | E::LabelOutOfRange { .. }
            | E::EmptyDataset
            | E::NoSampleForDigit(_)
            | E::LabelCollision(_)
            | E::BadCheckpoint(_)
            | E::Io(_) => CliError::Data(e.to_string()),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::ChecksumMismatch { .. } | CliError::Network(_) | CliError::MissingStage(_) | CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Verification(_) => 5,
            CliError::AmbiguousAssignment(_) | CliError::Core(_) => 1,
        }
    }
}
