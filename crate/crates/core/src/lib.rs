//! Sensitivity analysis for matched observational studies with continuous
//! doses and binary outcomes.
//!
//! The crate computes worst-case randomization p-values under a bias model
//! for dose assignment, design sensitivities and power of sensitivity
//! analyses, and confidence statements for the threshold attributable effect.
//! Every approximation ships with an exact enumeration counterpart.

pub mod assignment;
pub mod attributable;
pub mod balance;
pub mod design;
pub mod design_sensitivity;
pub mod dgp;
pub mod error;
pub mod hardness;
pub mod rng;
pub mod sharp_null;
pub mod statistic;

pub use error::{Error, Result};
