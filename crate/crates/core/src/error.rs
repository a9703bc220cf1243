use std::path::PathBuf;

/// Failures of the angle-of-progression geometry.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("{0} mask is empty")]
    EmptyMask(&'static str),
    #[error("need at least 2 pixels to fit an axis, got {0}")]
    TooFewPixels(usize),
    #[error("axis ill-defined: eigenvalue ratio {ratio:.3} below 1.2")]
    AxisIllDefined { ratio: f64 },
    #[error("axis endpoints are equidistant from the fetal head centroid")]
    AmbiguousOrientation,
    #[error("structures overlap at apex: inferior endpoint lies inside the fetal head hull")]
    OverlapAtApex,
    #[error("tangent certificate violated (cross product {cross:.3e})")]
    TangentCertificate { cross: f64 },
    #[error("undefined distance: {0} mask is empty")]
    UndefinedDistance(&'static str),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("data error in {path}: {msg}")]
    File { path: PathBuf, msg: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate statistics: {0}")]
    Degenerate(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::File {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
