//! Dual-volume semantic scene completion at desk scale.
//!
//! A stereo geometric volume and a BEV latent volume are built from a
//! rectified stereo pair, bridged by cross-attention with depth-confidence
//! filtering, ensembled, lifted into voxel features and decoded into a
//! semantic voxel grid. Everything runs on a small f64 tensor library with
//! reverse-mode differentiation so each stage can be checked against
//! brute-force oracles and finite differences.

pub mod bev;
pub mod camera;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod mie;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scene;
pub mod selftest;
pub mod ssc;
pub mod stereo;
pub mod tape;
pub mod tensor;
pub mod vol;
pub mod voxel;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
