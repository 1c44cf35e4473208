//! Supernet graph compiler and differentiable architecture search engine.

pub mod bench;
pub mod cost;
pub mod data;
pub mod error;
pub mod graph;
pub mod reparam;
pub mod search;
pub mod simplify;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
