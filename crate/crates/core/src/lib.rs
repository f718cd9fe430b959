//! Domain-adversarial single-stage detection at desk scale.

pub mod cli;
pub mod detector;
pub mod domainadapt;
mod error;
pub mod evalmap;
pub mod geometry;
pub mod nn;
pub mod tensor;
pub mod toydomains;
pub mod trainer;

pub use error::{Error, Result};
