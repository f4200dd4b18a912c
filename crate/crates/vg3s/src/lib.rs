//! Multi-view visual tokens to semantic 3-D occupancy.
//!
//! The pipeline adapts frozen-backbone token stacks into multi-scale
//! feature pyramids, decodes them into semantic Gaussian primitives,
//! splats those into a dense occupancy grid, and trains the whole chain
//! end to end against voxel labels. Everything runs on a hand-rolled
//! reverse-mode tape in double precision so gradients can be verified
//! numerically.

pub mod camera;
pub mod check;
pub mod config;
pub mod decoder;
pub mod evaluate;
pub mod fileio;
pub mod gaussians;
pub mod hgfa;
pub mod loss;
pub mod metrics;
pub mod ops_basic;
pub mod ops_nn;
pub mod parallel;
pub mod params;
pub mod rng;
pub mod scene;
pub mod selftest;
pub mod splat;
pub mod tape;
pub mod tensor;
pub mod tokens;
pub mod train;
pub mod voxel;

pub use tape::{Gradients, Tape, TensorId};
pub use tensor::Tensor;
