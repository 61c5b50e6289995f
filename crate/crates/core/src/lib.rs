//! Domain adaptation benchmark for two-class defect image classification.
//!
//! Modules follow the pipeline: [`dataset`] generates the synthetic domains,
//! [`augment`] provides weak/strong views, [`model`] builds classifiers,
//! aligners and discriminators, [`losses`] holds every loss term, [`trainers`]
//! implements the five training procedures and [`harness`] runs scenario
//! matrices and renders result tables.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod seed;
pub mod trainers;

pub use defectda_tensor as tensor;
pub use error::{Error, Result};
