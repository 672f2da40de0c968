//! Spectrally regularised two-stage least squares for high-dimensional
//! instrumental-variable regression with noisy covariates and instruments.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the
//! `*64` / `*32` aliases below pin the common instantiations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod datamodel;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod plot;
pub mod scalar;
pub mod speclin;

pub use error::{CcrError, Result};
pub use scalar::Real;

pub type ThinSvd64 = speclin::ThinSvd<f64>;
pub type ThinSvd32 = speclin::ThinSvd<f32>;
pub type Dataset64 = datamodel::Dataset<f64>;
pub type Dataset32 = datamodel::Dataset<f32>;
pub type GroundTruth64 = datamodel::GroundTruth<f64>;
pub type FirstStage64 = estimators::FirstStage<f64>;
pub type FirstStage32 = estimators::FirstStage<f32>;
