use thiserror::Error;

/// Errors raised by the numerics core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite value in input")]
    NonFiniteInput,
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("illumination pattern region '{0}' contains no LEDs")]
    EmptyRegion(String),
    #[error("shifted pupil support leaves the spectrum grid (shift {0:?} bins)")]
    FrequencyOutOfGrid((i64, i64)),
    #[error("zero background in transfer function")]
    ZeroBackground,
    #[error("negative intensity {0} for poisson noise")]
    NegativeIntensity(f64),
    #[error("high-resolution grid too small: factor {factor} < required {required}")]
    InsufficientGrid { factor: usize, required: usize },
    #[error("image has zero mean")]
    ZeroMeanImage,
    #[error("degenerate value range")]
    DegenerateRange,
    #[error("mask has {0} pixels, at least 100 required")]
    MaskTooSmall(usize),
    #[error("patch has zero mean")]
    ZeroMeanPatch,
    #[error("pixel ({row}, {col}) not covered by any patch")]
    CoverageGap { row: usize, col: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dataset has no training pairs")]
    EmptyDataset,
    #[error("training loss became non-finite at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("scale parameter must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("bisection upper bracket reaches only p = {reached} < {target}")]
    BracketFailure { reached: f64, target: f64 },
    #[error("mask selects no pixels")]
    EmptyMask,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable identifier.
    pub fn code(&self) -> &'static str {
        match self {
            Error::NonFiniteInput => "NON_FINITE_INPUT",
            Error::SizeMismatch(_) => "SIZE_MISMATCH",
            Error::InvalidArgument(_) => "INVALID_ARGUMENT",
            Error::IndexOutOfRange { .. } => "INDEX_OUT_OF_RANGE",
            Error::EmptyRegion(_) => "EMPTY_REGION",
            Error::FrequencyOutOfGrid(_) => "FREQUENCY_OUT_OF_GRID",
            Error::ZeroBackground => "ZERO_BACKGROUND",
            Error::NegativeIntensity(_) => "NEGATIVE_INTENSITY",
            Error::InsufficientGrid { .. } => "INSUFFICIENT_GRID",
            Error::ZeroMeanImage => "ZERO_MEAN_IMAGE",
            Error::DegenerateRange => "DEGENERATE_RANGE",
            Error::MaskTooSmall(_) => "MASK_TOO_SMALL",
            Error::ZeroMeanPatch => "ZERO_MEAN_PATCH",
            Error::CoverageGap { .. } => "COVERAGE_GAP",
            Error::ShapeMismatch(_) => "SHAPE_MISMATCH",
            Error::EmptyDataset => "EMPTY_DATASET",
            Error::DivergedLoss { .. } => "DIVERGED_LOSS",
            Error::NonPositiveSigma(_) => "NON_POSITIVE_SIGMA",
            Error::BracketFailure { .. } => "BRACKET_FAILURE",
            Error::EmptyMask => "EMPTY_MASK",
        }
    }
}
