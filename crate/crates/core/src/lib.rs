//! Defensive output generation on a synthetic reasoning task.

pub mod corpus;
pub mod distill;
pub mod error;
pub mod lab;
pub mod landscape;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
