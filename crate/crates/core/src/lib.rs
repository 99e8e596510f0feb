//! Riemannian geometry of generator latent spaces.
//!
//! A generator `g: Z → X` induces the pull-back metric `M(z) = JᵀJ` on its
//! latent space. This crate evaluates that metric (deterministic, stochastic
//! and feature-chained variants), finds curves shorter than the straight
//! latent line by optimizing cubic B-splines, and measures how far linear
//! interpolations are from geodesics by Monte-Carlo sampling.

pub mod compare;
pub mod data;
pub mod error;
pub mod fields;
pub mod geodesic;
pub mod linalg;
pub mod metric;
pub mod network;
pub mod sampling;
pub mod spline;
pub mod training;

pub use error::{Error, Result};
