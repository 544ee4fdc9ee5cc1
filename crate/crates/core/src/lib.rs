//! Continual visual question answering on a synthetic driving-scene stream.

pub mod autodiff;
pub mod checkpoint;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod model;
pub mod projection;
pub mod replay;
pub mod seed;
pub mod taskstream;
pub mod trainer;

pub use error::{Error, Result};
