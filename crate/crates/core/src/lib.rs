pub mod blocks;
pub mod config;
pub mod crossmodal;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod imageio;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod understanding;

pub use error::{Error, Result};
