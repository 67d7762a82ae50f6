use std::io;
use std::path::{Path, PathBuf};

/// Errors from file formats, configuration and the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    /// Malformed file contents; `offset` is the byte where parsing failed.
    #[error("{}: byte {offset}: {message}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    /// A stored tensor does not have the shape its metadata implies.
    #[error("{}: shape mismatch in `{tensor}`: expected {expected:?}, found {found:?}", path.display())]
    ShapeMismatch {
        path: PathBuf,
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] voxelrf_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: impl AsRef<Path>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().to_path_buf(),
            offset,
            message: message.into(),
        }
    }

    /// Process exit code: 2 configuration, 3 I/O, 4 file format,
    /// 5 numerical failure.
    pub fn exit_code(&self) -> u8 {
        use voxelrf_core::Error as Core;
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } => 3,
            Error::Format { .. } | Error::ShapeMismatch { .. } => 4,
            Error::Core(Core::NonFiniteLoss { .. } | Core::NonFiniteGradient { .. }) => 5,
            Error::Core(_) => 2,
        }
    }
}
