pub mod adapters;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod merge;
pub mod objectives;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
