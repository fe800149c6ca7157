//! Language-conditioned moment retrieval.

pub mod error;
pub mod graph;

pub use error::{Error, Result};
