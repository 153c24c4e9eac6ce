use thiserror::Error;

/// Failures raised anywhere in the KAM pipeline.
///
/// Every variant is a recoverable condition; the numerical routines never
/// panic on bad input.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum KamError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("axis {axis} out of range for dimension {dim}")]
    AxisOutOfRange { axis: usize, dim: usize },

    #[error("unsupported dimension {0} (supported: 1..={max})", max = crate::series::MAX_DIM)]
    UnsupportedDimension(usize),

    #[error("term (k={k:?}, m={m:?}) lies outside the truncation (K={fourier_cutoff}, M={taylor_degree})")]
    OutsideTruncation {
        k: Vec<i32>,
        m: Vec<u32>,
        fourier_cutoff: u32,
        taylor_degree: u32,
    },

    #[error("majorant is not finite")]
    Overflow,

    #[error("resonant frequency: |omega.k| = {divisor:e} at k = {k:?}")]
    Resonance { k: Vec<i32>, divisor: f64 },

    #[error("frequency certificate missing or too shallow: depth {depth}, need {needed}")]
    InsufficientCertificate { depth: u32, needed: u32 },

    #[error("right-hand side has non-zero angular mean {magnitude:e}")]
    NonZeroMean { magnitude: f64 },

    #[error("twist condition violated: {0}")]
    SingularTwist(String),

    #[error("angle map is not a contraction: |dv| = {dv_norm} >= 1")]
    NonContraction { dv_norm: f64 },

    #[error("action shift too large: |dR| = {shift:e} exceeds {limit:e}")]
    ShiftTooLarge { shift: f64, limit: f64 },

    #[error("composition leaves the stored domain: {0}")]
    DomainShortfall(String),

    #[error("integrator blew up at t = {time}")]
    IntegratorBlowUp { time: f64 },

    #[error("iteration did not converge: {0}")]
    NoConvergence(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl KamError {
    /// Short machine-readable tag, used in error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            KamError::DimensionMismatch { .. } => "dimension_mismatch",
            KamError::AxisOutOfRange { .. } => "axis_out_of_range",
            KamError::UnsupportedDimension(_) => "unsupported_dimension",
            KamError::OutsideTruncation { .. } => "outside_truncation",
            KamError::Overflow => "overflow",
            KamError::Resonance { .. } => "resonant",
            KamError::InsufficientCertificate { .. } => "insufficient_certificate",
            KamError::NonZeroMean { .. } => "non_zero_mean",
            KamError::SingularTwist(_) => "singular_twist",
            KamError::NonContraction { .. } => "non_contraction",
            KamError::ShiftTooLarge { .. } => "shift_too_large",
            KamError::DomainShortfall(_) => "domain_shortfall",
            KamError::IntegratorBlowUp { .. } => "integrator_blow_up",
            KamError::NoConvergence(_) => "no_convergence",
            KamError::InvalidArgument(_) => "invalid_argument",
        }
    }
}

pub type Result<T> = std::result::Result<T, KamError>;
