use fedlrgd_core::FedError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] FedError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("suite `{0}` failed")]
    SuiteFailed(String),
}

impl CliError {
    /// 1 for suite or runtime failures, 2 for anything the config caused.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                FedError::InvalidArgument(_)
                | FedError::DimensionMismatch(_)
                | FedError::InvalidCondition(_)
                | FedError::InconsistentParams(_)
                | FedError::PhiTooSmall { .. }
                | FedError::TooLarge(_)
                | FedError::Parse(_) => 2,
                _ => 1,
            },
            CliError::Io(_) | CliError::SuiteFailed(_) => 1,
        }
    }
}
