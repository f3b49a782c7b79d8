use thiserror::Error;

/// Errors raised by the registration toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite coordinate")]
    NonFiniteCoordinate,

    #[error("degenerate intensity distribution")]
    DegenerateIntensity,

    #[error("empty mask")]
    EmptyMask,

    #[error("volume too small: {0}")]
    TooSmall(String),

    #[error("fixed-point inversion did not converge (residual {residual:.3e} after {iterations} iterations)")]
    InversionDiverged { residual: f64, iterations: usize },

    #[error("structure mismatch: {0}")]
    StructureMismatch(String),

    #[error(transparent)]
    Nifti(#[from] crate::io::nifti::NiftiError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
