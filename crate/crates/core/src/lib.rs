//! Deep metric learning with a weighted contrastive loss.
//!
//! Pairs inside a class-balanced mini-batch are weighted by online soft
//! mining scores (a Gaussian of the distance for positives, a margin hinge
//! for negatives) and by class-aware attention, a softmax compatibility
//! between each embedding and its label's context vector. The crate bundles
//! everything needed to train and verify that loss at desk scale: a small
//! exact-gradient embedding network, a synthetic dataset generator with
//! label-noise outliers, retrieval evaluation, and a finite-difference
//! gradient checker.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod mining;
pub mod model;
pub mod numerics;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
pub use mining::Mode;
pub use numerics::{DistanceMatrix, Matrix, Rng};
