//! Budding ensemble detection: a shared backbone feeding two duplicated
//! detector heads, trained with tandem losses that make the heads agree on
//! objects and disagree elsewhere, plus the evaluation stack used to measure
//! calibration and out-of-distribution behaviour.

pub mod detector;
pub mod diversity;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod tandem;

pub use error::{BeaError, Result};
