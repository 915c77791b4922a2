//! Per-pair deformable 3D image registration with a neural correspondence
//! field: a coordinate MLP predicts a coarse offset for every voxel, a small
//! residual CNN smooths it, and the moving image is resampled through the
//! resulting correspondence field. The network is optimized from scratch for
//! each image pair.

pub mod diff;
pub mod engine;
pub mod error;
pub mod losses;
pub mod metaimage;
pub mod metrics;
pub mod model;
pub mod real;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
pub use real::Real;
pub use volume::{make_grid, normalize_intensity, Dims, FieldUnit, Grid, IntensityUnit, VectorField, Volume};
