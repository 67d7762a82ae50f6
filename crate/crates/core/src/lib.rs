//! Voxelized wireless radiance fields.
//!
//! A receiver sits at a fixed position and observes a spatial spectrum: the
//! received power per (azimuth, elevation) direction over its upper
//! hemisphere. This crate learns a volumetric model of the environment from
//! (transmitter position, spectrum) pairs and synthesizes spectra and RSSI for
//! unseen transmitter positions.
//!
//! The model is an explicit density grid and feature grid, queried by
//! trilinear interpolation, followed by two shallow MLPs: a deformation
//! network conditioned on the transmitter position and a radiance network
//! conditioned on the emission direction. Rendering is front-to-back alpha
//! compositing with empty-space skipping; training is Adam with a
//! coarse-to-fine grid schedule.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. File formats, dataset synthesis and the command line live in the
//! companion `voxelrf` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

mod error;
pub mod field;
pub mod geometry;
pub mod math;
pub mod metrics;
pub mod mlp;
pub mod objectives;
pub mod optim;
pub mod renderer;
pub mod trainer;
pub mod voxel_grid;

pub use error::{Error, Result};
pub use field::{FieldModel, GradientSet, ModelConfig, PositionalEncoding};
pub use geometry::{Aabb, Vec3};
pub use renderer::{SceneGeometry, SpatialSpectrum};
pub use trainer::{TrainConfig, TrainingSet};
pub use voxel_grid::VoxelGrid;
