//! Sparse voxel transformer networks for point cloud place recognition.
//!
//! The crate builds three model variants over a shared sparse convolution
//! stem: an atom-based attention branch operating directly on voxels, a
//! cluster-based branch attending over a small set of learned tokens, and
//! the combined network fusing both. Everything runs on a from-scratch
//! tape-based autodiff engine over 2-D arrays; there is no GPU path.
//!
//! All numerics are generic over the scalar type via [`scalar::Scalar`]
//! (implemented for `f32` and `f64`). The crate-level aliases below pin the
//! default precision used by the training pipeline and the CLI.

pub mod asvt;
pub mod autodiff;
pub mod checkpoint;
pub mod csvt;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod model;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod retrieval;
pub mod sparse;
pub mod synth;
pub mod training;
pub(crate) mod wire;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar type for training and evaluation.
pub type Real = f64;

/// Sparse voxel grid at the default precision.
pub type Grid = sparse::SparseVoxelGrid<Real>;

/// Batched voxel grids at the default precision.
pub type Batch = sparse::VoxelBatch<Real>;

/// Autodiff tape at the default precision.
pub type RealTape = autodiff::Tape<Real>;
