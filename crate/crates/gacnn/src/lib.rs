//! Graph attention convolution network for airborne LiDAR point clouds.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense row-major tensors on a reverse-mode tape,
//! * [`geometry`] — deterministic spatial kernels (KNN, farthest-point
//!   sampling, kernel density estimation, inverse-distance interpolation,
//!   cuboid tiling),
//! * [`attention`] — edge, density, and global attention assembled into the
//!   graph attention convolution module,
//! * [`network`] — the four-stage encoder/decoder classifier,
//! * [`training`] — cross-entropy loss, Adam, block sampling, the train loop,
//! * [`data_io`] — point files, predictions, checkpoints,
//! * [`evaluation`] — confusion matrix and derived metrics,
//! * [`config`] — the run configuration consumed by the CLI.

pub mod attention;
pub mod config;
pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod network;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
