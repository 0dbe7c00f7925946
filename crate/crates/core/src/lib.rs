//! Deep transfer learning for person re-identification.

pub mod adapt;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod model;
pub mod sampler;
pub mod train;

pub use error::{Error, Result};
