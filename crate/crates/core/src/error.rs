use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {}: {message}", path.display())]
    Manifest { path: PathBuf, message: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-rigid pose: {0}")]
    NonRigidPose(String),

    #[error("image {} is {actual_width}x{actual_height}, expected {width}x{height}", path.display())]
    ImageSize {
        path: PathBuf,
        width: u32,
        height: u32,
        actual_width: u32,
        actual_height: u32,
    },

    #[error("unsupported image {}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error("invalid camera intrinsics: {0}")]
    Intrinsics(String),

    #[error("pixel ({px}, {py}) outside {width}x{height} image")]
    PixelOutOfBounds {
        px: u32,
        py: u32,
        width: u32,
        height: u32,
    },

    #[error("invalid grid spec: {0}")]
    GridSpec(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("sampling step must be positive, got {0}")]
    Step(f64),

    #[error("forward pass records missing")]
    MissingRecords,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid training config: {0}")]
    Config(String),

    #[error("non-finite loss at iteration {iteration} (photometric {photometric}, structural {structural})")]
    NonFiniteLoss {
        iteration: usize,
        photometric: f64,
        structural: f64,
    },

    #[error("not a {0} file")]
    BadMagic(&'static str),

    #[error("corrupt {what}: {detail}")]
    Corrupt { what: &'static str, detail: String },

    #[error("invalid palette: {0}")]
    Palette(String),

    #[error("inconsistent slice stack: {0}")]
    Stack(String),

    #[error("png encoding failed: {0}")]
    PngEncode(#[from] png::EncodingError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by non-finite numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. })
    }
}
