//! Concept-aware continual unlearning with a routed mixture of refusers.

pub mod cli;
pub mod concepts;
pub mod engine;
pub mod error;
pub mod eval;
pub mod inference;
pub mod numerics;
pub mod refusal;
pub mod world;

pub use error::{Error, Result};
