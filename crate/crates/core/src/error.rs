use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not Hermitian (max asymmetry {0:.3e})")]
    NotHermitian(f64),

    #[error("matrix is not unitary (deviation {0:.3e})")]
    NotUnitary(f64),

    #[error("unknown subsystem label `{0}`")]
    UnknownLabel(String),

    #[error("duplicate subsystem label `{0}`")]
    DuplicateLabel(String),

    #[error("label sets overlap on `{0}`")]
    OverlappingLabels(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("state dimension {0} exceeds the simulation cap {1}")]
    TooLarge(usize, usize),

    #[error("state norm drifted to {0:.12} during simulation")]
    NormDrift(f64),

    #[error("invalid protocol program: {0}")]
    InvalidProgram(String),

    #[error("label conflict while composing programs: {0}")]
    LabelConflict(String),

    #[error("resource `{0}` is not shared between Alice and Bob")]
    NotBipartite(String),

    #[error("target distribution is not reachable by dilution: {0}")]
    MajorizationFails(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("channel is not CPTP: {0}")]
    NotCptp(String),

    #[error("Cesaro mean did not converge after {0} terms")]
    NoConvergence(usize),

    #[error("no sign change found: {0}")]
    NoSignChange(String),
}

pub type Result<T> = std::result::Result<T, Error>;
