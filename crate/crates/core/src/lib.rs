//! distillkit: a knowledge-distillation toolkit for lightweight image
//! classifiers.
//!
//! The crate trains a small student CNN under three teacher-guidance regimes
//! (response-based, feature-based, and multi-teacher relation-based with a
//! multi-head-attention fusion block), ingests folder-per-class image
//! datasets, and produces the full evaluation surface: metrics, confusion
//! matrices, Grad-CAM saliency maps, and model complexity reports.
//!
//! All numeric kernels are generic over [`Scalar`] (`f32` or `f64`); training
//! normally runs in `f32` while gradient checks run in `f64`.

pub mod checkpoint;
pub mod error;
pub mod model_zoo;
pub mod nn;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar type for training.
pub type TrainScalar = f32;

/// Scalar type used by the finite-difference gradient-check oracles.
pub type CheckScalar = f64;
