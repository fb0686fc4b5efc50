//! Training and mechanistic probing of single-layer, attention-only
//! transformers on the Count01 counting language.

pub mod data;
pub mod error;
pub mod experiments;
pub mod export;
pub mod interventions;
pub mod minimal;
pub mod model;
pub mod numerics;
pub mod probes;
pub mod trainer;

pub use error::{Error, Result};
