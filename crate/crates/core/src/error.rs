use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variant names are part of the external contract: the CLI and the HTTP
/// service echo [`Error::name`] in their error bodies.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed header: {0}")]
    HeaderParse(String),
    #[error("payload size mismatch: expected {expected} values, found {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("channel {0} not present in grid")]
    MissingChannel(String),
    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },
    #[error("grid geometry mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("curve {curve_id}: need at least 3 distinct z values, found {distinct}")]
    InsufficientPoints { curve_id: String, distinct: usize },
    #[error("curve {0}: normal equations are singular")]
    DegenerateSystem(String),
    #[error("curves {0} and {1} have no overlapping z span")]
    NoOverlap(String, String),
    #[error("no shared curves between the two sets")]
    NoSharedCurves,
    #[error("invalid key point: {0}")]
    InvalidPoint(String),

    #[error("transform is singular")]
    SingularTransform,
    #[error("control point count mismatch: {src} source vs {dst} target")]
    ControlMismatch { src: usize, dst: usize },
    #[error("control points are degenerate: {0}")]
    DegenerateControls(String),
    #[error("inverse did not converge: residual {residual_mm:.3e} mm after {iterations} iterations")]
    InverseNonConvergent { residual_mm: f64, iterations: usize },

    #[error("feature channel mismatch: {0} vs {1}")]
    ChannelMismatch(usize, usize),
    #[error("feature location mismatch: {0} vs {1}")]
    LocationMismatch(usize, usize),
    #[error("grid too small for feature extraction: {0}")]
    EmptyGrid(String),

    #[error("optimizer produced no successful evaluation")]
    OptimizerBudgetExceeded,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable variant name, used as the machine-readable error code.
    pub fn name(&self) -> &'static str {
        match self {
            Error::MissingFile(_) => "MissingFile",
            Error::HeaderParse(_) => "HeaderParse",
            Error::SizeMismatch { .. } => "SizeMismatch",
            Error::IoFailure { .. } => "IoFailure",
            Error::MissingChannel(_) => "MissingChannel",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::GridMismatch(_) => "GridMismatch",
            Error::InvalidGrid(_) => "InvalidGrid",
            Error::InsufficientPoints { .. } => "InsufficientPoints",
            Error::DegenerateSystem(_) => "DegenerateSystem",
            Error::NoOverlap(..) => "NoOverlap",
            Error::NoSharedCurves => "NoSharedCurves",
            Error::InvalidPoint(_) => "InvalidPoint",
            Error::SingularTransform => "SingularTransform",
            Error::ControlMismatch { .. } => "ControlMismatch",
            Error::DegenerateControls(_) => "DegenerateControls",
            Error::InverseNonConvergent { .. } => "InverseNonConvergent",
            Error::ChannelMismatch(..) => "ChannelMismatch",
            Error::LocationMismatch(..) => "LocationMismatch",
            Error::EmptyGrid(_) => "EmptyGrid",
            Error::OptimizerBudgetExceeded => "OptimizerBudgetExceeded",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Json(_) => "HeaderParse",
        }
    }

    /// True for failures of numerical procedures rather than bad input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateSystem(_)
                | Error::SingularTransform
                | Error::DegenerateControls(_)
                | Error::InverseNonConvergent { .. }
                | Error::OptimizerBudgetExceeded
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }
}
