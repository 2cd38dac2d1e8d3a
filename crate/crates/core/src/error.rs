use thiserror::Error;

/// Errors raised by the simulation core.
///
/// Singular and out-of-domain conditions are hard errors by design: smoothing
/// a Biot-Savart singularity or extrapolating a field grid would corrupt flux
/// integrals without any visible symptom.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("field point within {dist:.3e} m of a current segment (limit {limit:.1e} m)")]
    Singularity { dist: f64, limit: f64 },

    #[error("out of domain: {0}")]
    OutOfDomain(String),

    #[error("model invalid: {0}")]
    ModelInvalid(String),

    #[error("degenerate normalization: external reference sample is zero")]
    DegenerateNormalization,

    #[error("uncancelable: cancellation flux-per-ampere is zero")]
    Uncancelable,

    #[error("timeline coverage: {0}")]
    Coverage(String),

    #[error("provenance mismatch: {0}")]
    Provenance(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("periphery policy: {0}")]
    Policy(String),

    #[error("degenerate ROI: {0}")]
    DegenerateRoi(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
