//! File formats, synthetic scenes, dataset tooling and the `voxelrf` command
//! line around [`voxelrf_core`].
//!
//! - [`spectrum_io`]: `VXRF` binary spectrum files.
//! - [`scene`]: analytic Gaussian-blob scenes and a brute-force reference
//!   renderer that shares no code with the core renderer.
//! - [`dataset`]: dataset directories (JSON manifest plus spectrum files),
//!   seeded synthesis and train/test splits.
//! - [`checkpoint`]: `VXCK` model checkpoints.
//! - [`config`] and [`cli`]: run configuration and commands.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod scene;
pub mod spectrum_io;

pub use error::{Error, Result};
