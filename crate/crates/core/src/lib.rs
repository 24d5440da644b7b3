pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod freq;
pub mod head;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod profiler;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
