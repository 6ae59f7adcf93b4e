use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A grid dimension is zero.
    DegenerateDims,
    /// A spacing component is not strictly positive.
    InvalidSpacing,
    /// Buffer length does not match the product of the dimensions.
    DataLength { expected: usize, actual: usize },
    /// A voxel value is NaN, infinite, or outside the allowed range.
    InvalidValue(&'static str),
    /// Two volumes that must share a grid do not.
    GeometryMismatch,
    /// Two arrays that must have the same length do not.
    ShapeMismatch { expected: usize, actual: usize },
    /// A parameter violates its declared range.
    InvalidParameter(String),
    /// The requested label selects no voxel.
    NoLesionVoxels,
    /// No samples were provided.
    EmptySamples,
    /// Automatic bandwidth selection on zero-variance samples.
    DegenerateBandwidth,
    /// A statistic needs more observations than were given.
    TooFewSamples { needed: usize, actual: usize },
    /// Paired differences have zero variance.
    ZeroVariance,
    /// Training was requested on an empty dataset.
    EmptyDataset,
    /// Supervision mode without an ILP function to build targets from.
    MissingIlpTarget,
    /// Lesion or blob placement failed after the retry budget.
    InfeasiblePlacement,
    /// A numeric computation produced a non-finite result.
    NonFinite(&'static str),
}

impl Error {
    /// True for failures of a numeric nature (as opposed to bad input data).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::DegenerateBandwidth | Error::ZeroVariance | Error::NonFinite(_)
        )
    }

    /// Stable identifier used in messages and by the bindings.
    pub fn name(&self) -> &'static str {
        match self {
            Error::DegenerateDims => "DegenerateDims",
            Error::InvalidSpacing => "InvalidSpacing",
            Error::DataLength { .. } => "DataLength",
            Error::InvalidValue(_) => "InvalidValue",
            Error::GeometryMismatch => "GeometryMismatch",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::NoLesionVoxels => "NoLesionVoxels",
            Error::EmptySamples => "EmptySamples",
            Error::DegenerateBandwidth => "DegenerateBandwidth",
            Error::TooFewSamples { .. } => "TooFewSamples",
            Error::ZeroVariance => "ZeroVariance",
            Error::EmptyDataset => "EmptyDataset",
            Error::MissingIlpTarget => "MissingIlpTarget",
            Error::InfeasiblePlacement => "InfeasiblePlacement",
            Error::NonFinite(_) => "NonFinite",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DegenerateDims => write!(f, "grid has a zero dimension"),
            Error::InvalidSpacing => write!(f, "voxel spacing must be positive"),
            Error::DataLength { expected, actual } => {
                write!(f, "data length {actual} does not match dims product {expected}")
            }
            Error::InvalidValue(what) => write!(f, "invalid voxel value: {what}"),
            Error::GeometryMismatch => write!(f, "volume geometries differ"),
            Error::ShapeMismatch { expected, actual } => {
                write!(f, "shape mismatch: expected {expected} elements, got {actual}")
            }
            Error::InvalidParameter(msg) => write!(f, "invalid parameter: {msg}"),
            Error::NoLesionVoxels => write!(f, "NoLesionVoxels: mask contains no voxel with the requested label"),
            Error::EmptySamples => write!(f, "no samples given"),
            Error::DegenerateBandwidth => {
                write!(f, "DegenerateBandwidth: samples have zero variance; give a fixed bandwidth")
            }
            Error::TooFewSamples { needed, actual } => {
                write!(f, "need at least {needed} samples, got {actual}")
            }
            Error::ZeroVariance => write!(f, "ZeroVariance: paired differences are all identical"),
            Error::EmptyDataset => write!(f, "dataset is empty"),
            Error::MissingIlpTarget => write!(f, "ILP supervision requested without an ILP function"),
            Error::InfeasiblePlacement => write!(f, "could not place phantom structures within the retry budget"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
        }
    }
}

impl core::error::Error for Error {}
