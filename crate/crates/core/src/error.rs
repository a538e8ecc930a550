use thiserror::Error;

/// Errors raised by the geometry, imaging, loss and estimation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("homography is singular (|det| = {det:e})")]
    Singular { det: f64 },

    #[error("composition produced a singular homography (|det| = {det:e})")]
    SingularResult { det: f64 },

    #[error("point ({x}, {y}) maps to infinity (denominator {denominator:e})")]
    DegeneratePoint { x: f64, y: f64, denominator: f64 },

    #[error("degenerate correspondence configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("homography horizon crosses the {width}x{height} grid")]
    GridDegenerate { width: usize, height: usize },

    #[error("invalid correspondences: {0}")]
    InvalidCorrespondences(String),

    #[error("image too small: {0}")]
    TooSmall(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("feature depth mismatch ({0} vs {1})")]
    DepthMismatch(usize, usize),

    #[error("only {0} matches survived, at least 4 are required")]
    NoMatches(usize),

    #[error("no valid pixels in the comparison mask")]
    EmptyMask,

    #[error("homography sampling exhausted after {0} rejections")]
    SamplingExhausted(usize),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("optimization diverged: loss {loss:e} exceeds 10x the initial {initial:e}")]
    Diverged { loss: f64, initial: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("missing file: {0}")]
    MissingFile(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Stable machine-readable code for error records.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Singular { .. } => "E_SINGULAR",
            Error::SingularResult { .. } => "E_SINGULAR_RESULT",
            Error::DegeneratePoint { .. } => "E_DEGENERATE_POINT",
            Error::DegenerateConfiguration(_) => "E_DEGENERATE_CONFIGURATION",
            Error::GridDegenerate { .. } => "E_GRID_DEGENERATE",
            Error::InvalidCorrespondences(_) => "E_INVALID_CORRESPONDENCES",
            Error::TooSmall(_) => "E_TOO_SMALL",
            Error::ShapeMismatch(_) => "E_SHAPE_MISMATCH",
            Error::DepthMismatch(..) => "E_DEPTH_MISMATCH",
            Error::NoMatches(_) => "E_NO_MATCHES",
            Error::EmptyMask => "E_EMPTY_MASK",
            Error::SamplingExhausted(_) => "E_SAMPLING_EXHAUSTED",
            Error::EmptyInput(_) => "E_EMPTY_INPUT",
            Error::Diverged { .. } => "E_DIVERGED",
            Error::InvalidConfig(_) => "E_INVALID_CONFIG",
            Error::Parse { .. } => "E_PARSE",
            Error::Validation(_) => "E_VALIDATION",
            Error::MissingFile(_) => "E_MISSING_FILE",
            Error::Io(_) => "E_IO",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(e.to_string())
        } else {
            Error::Io(e.to_string())
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
