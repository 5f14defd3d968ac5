//! Generative modeling of functions on arbitrary discretizations with a
//! geometry-aware flow-matching velocity model.

pub mod batch;
pub mod data_io;
pub mod diff;
pub mod error;
pub mod flow;
pub mod gaussian_field;
pub mod geometry;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod scalar;

pub use batch::FunctionBatch;
pub use error::{MinoError, Result};
pub use geometry::{Domain, EdgeList, LatentGrid, LatentGridSpec, PointSet};
pub use scalar::Scalar;

pub type FunctionBatch32 = FunctionBatch<f32>;
pub type FunctionBatch64 = FunctionBatch<f64>;

pub type VelocityModel32 = model::VelocityModel<f32>;
pub type VelocityModel64 = model::VelocityModel<f64>;
