use svio_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SvioError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("parameter table mismatch: {}", .0.join(", "))]
    ParamMismatch(Vec<String>),
    #[error("numerical failure at step {step}: {detail}")]
    Numerical { step: usize, detail: String },
    #[error("unsupported fusion mode for this operation: {0}")]
    UnsupportedMode(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, SvioError>;

/// Lets model code run inside closures that expect autodiff results, such
/// as gradient checks.
impl From<SvioError> for AutodiffError {
    fn from(e: SvioError) -> Self {
        match e {
            SvioError::Autodiff(inner) => inner,
            SvioError::Dimension(d) => AutodiffError::Contract(format!("dimension: {d}")),
            SvioError::Parameter(p) => AutodiffError::Parameter(p),
            other => AutodiffError::Contract(other.to_string()),
        }
    }
}
