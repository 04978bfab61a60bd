//! Synthetic data generation and 3D shape/pose regression for articulated quadrupeds.
//!
//! The crate is organized around a parametric body model ([`body_model`]), a
//! weak-perspective camera ([`camera`]), a differentiable silhouette renderer
//! ([`renderer`]), a controlled-variation synthetic data pipeline ([`synthpipe`]),
//! regression networks ([`network`]), training losses ([`losses`]), a training
//! loop ([`training`]), and evaluation metrics ([`evaluation`]).
//!
//! All differentiable paths run on [`candle_core`] tensors; plain `f64`
//! entry points are provided where gradients are not needed.

pub mod archive;
pub mod body_model;
pub mod camera;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod network;
pub mod renderer;
pub mod synthpipe;
pub mod training;

pub use error::{Error, Result};
