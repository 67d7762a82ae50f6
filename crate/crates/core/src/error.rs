use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A grid query landed outside the grid's bounding box.
    #[error("point ({x}, {y}, {z}) lies outside the grid bounds")]
    OutOfBounds { x: f64, y: f64, z: f64 },
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Two buffers that must be congruent are not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// RSSI of a spectrum whose cells sum to zero.
    #[error("no received power: spectrum sums to zero")]
    NoReceivedPower,
    #[error("non-finite gradient in tensor `{tensor}`")]
    NonFiniteGradient { tensor: String },
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("no record with positive predicted power to calibrate against")]
    NoCalibrationRecords,
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::Error::Contract(alloc::format!($($arg)*))
    };
}
pub(crate) use contract;
