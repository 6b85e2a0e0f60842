use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] locc_core::Error),

    #[error("{0}")]
    Usage(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 2 for bad input, 1 when a numerical routine itself failed.
    pub fn exit_code(&self) -> u8 {
        use locc_core::Error as E;
        match self {
            CliError::Core(E::NormDrift(_) | E::Verification(_) | E::NotCptp(_) | E::NoConvergence(_)) => 1,
            _ => 2,
        }
    }
}
