//! Surface reconstruction from simulated multiview ultrasound sweeps.
//!
//! An occupancy network maps per-point acoustic properties (attenuation,
//! reflection, scattering) to an inside-probability. It is trained with a
//! cross-entropy loss that scales the prediction by the beam transmittance,
//! so samples hidden in acoustic shadow cannot pull the model towards
//! "empty". Surfaces are extracted with marching cubes and scored with
//! point-sampled distance metrics.

pub mod config;
pub mod error;
pub mod extraction;
pub mod geometry;
pub mod linalg;
mod mc_tables;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod phantom;
pub mod real;
pub mod training;
pub mod transmittance;

pub use error::{Error, Result};
pub use real::Real;

pub type Vec3f = linalg::Vec3<f32>;
pub type Vec3d = linalg::Vec3<f64>;
pub type Pose32 = geometry::Pose<f32>;
pub type Pose64 = geometry::Pose<f64>;
pub type Model32 = network::OccupancyModel<f32>;
pub type Model64 = network::OccupancyModel<f64>;
pub type Sample32 = training::AcousticSample<f32>;
pub type Sample64 = training::AcousticSample<f64>;
pub type Grid32 = extraction::OccupancyGrid<f32>;
pub type Grid64 = extraction::OccupancyGrid<f64>;
pub type Mesh32 = extraction::TriangleMesh<f32>;
pub type Mesh64 = extraction::TriangleMesh<f64>;
