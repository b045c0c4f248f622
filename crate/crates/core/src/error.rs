use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the design pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("bessel domain error: {kind} undefined at x = {x}")]
    BesselDomain { kind: &'static str, x: f64 },

    #[error("singular frequency at {freq_hz} Hz: {what}")]
    SingularFrequency { freq_hz: f64, what: &'static str },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid frequency grid: {0}")]
    InvalidGrid(String),

    #[error("cavity units have mismatched waveguide radius at indices {indices:?}")]
    RadiusMismatch { indices: Vec<usize> },

    #[error("empty unit list")]
    EmptyUnits,

    #[error("sampler exhausted: no accepted geometry in {draws} consecutive draws")]
    SamplerExhausted { draws: u64 },

    #[error("geometry does not fit in frame: {0}")]
    OutOfFrame(String),

    #[error("parameter detection failed: {0}")]
    DetectionFailed(String),

    #[error("no air path between inlet and outlet")]
    NoPath,

    #[error("linear solve diverged at frequency index {index} ({freq_hz} Hz): relative residual {residual:e}")]
    SolverDiverged { index: usize, freq_hz: f64, residual: f64 },

    #[error("shape mismatch at layer {layer}: {detail}")]
    ShapeMismatch { layer: usize, detail: String },

    #[error("backward called twice without a new forward pass")]
    BackwardTwice,

    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: String },

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("missing sample id {0}")]
    MissingId(usize),

    #[error("dataset incomplete: {0}")]
    IncompleteDataset(PathBuf),

    #[error("empty training split")]
    EmptyTrainSplit,

    #[error("all {0} candidates failed evaluation")]
    AllCandidatesFailed(usize),

    #[error("no geometry found: {0}")]
    NoMatch(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}

impl Error {
    /// Stable snake_case tag for machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::BesselDomain { .. } => "bessel_domain",
            Error::SingularFrequency { .. } => "singular_frequency",
            Error::InvalidGeometry(_) => "invalid_geometry",
            Error::InvalidGrid(_) => "invalid_grid",
            Error::RadiusMismatch { .. } => "radius_mismatch",
            Error::EmptyUnits => "empty_units",
            Error::SamplerExhausted { .. } => "sampler_exhausted",
            Error::OutOfFrame(_) => "out_of_frame",
            Error::DetectionFailed(_) => "detection_failed",
            Error::NoPath => "no_path",
            Error::SolverDiverged { .. } => "solver_diverged",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::BackwardTwice => "backward_twice",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::NonFiniteLoss(_) => "non_finite_loss",
            Error::MissingId(_) => "missing_id",
            Error::IncompleteDataset(_) => "incomplete_dataset",
            Error::EmptyTrainSplit => "empty_train_split",
            Error::AllCandidatesFailed(_) => "all_candidates_failed",
            Error::NoMatch(_) => "no_match",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
