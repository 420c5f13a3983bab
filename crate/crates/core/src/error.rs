use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {}", .0.join("; "))]
    InvalidParams(Vec<String>),

    #[error("eigendecomposition failed: {reason} (residual {residual:e})")]
    Eigensolver { reason: String, residual: f64 },

    #[error("propagation did not converge: dt-halving discrepancy {discrepancy:e} exceeds tolerance {tolerance:e}")]
    NonConvergence { discrepancy: f64, tolerance: f64 },

    #[error("eigenstate index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("energy window {bin} (E = {energy}) contains no eigenstates")]
    EmptyWindow { bin: i64, energy: f64 },

    #[error("energy {energy} lies outside the spectrum [{min}, {max}]")]
    WindowOffSpectrum { energy: f64, min: f64, max: f64 },

    #[error("no energy bin holds at least {required} propagated eigenstates")]
    UnderpopulatedBin { required: usize },

    #[error("initial-state weights sum to {sum}, expected 1")]
    UnnormalizedWeights { sum: f64 },

    #[error("kernel support [{lo}, {hi}] does not fit inside {bins} bins around the reference bin")]
    TruncatedKernel { lo: i64, hi: i64, bins: usize },

    #[error("transition table covers {covered} of {dim} initial states; fully covered bins: {checkable:?}")]
    PartialTable { covered: usize, dim: usize, checkable: Vec<i64> },

    #[error("sample of {count} values is too small for a spread estimate")]
    SampleTooSmall { count: usize },

    #[error("result store {path} does not match this run: {reason}")]
    StoreMismatch { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs or the disk.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Eigensolver { .. } | Error::NonConvergence { .. })
    }
}
