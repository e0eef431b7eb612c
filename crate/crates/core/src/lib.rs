pub mod audio;
pub mod dataset;
pub mod error;
pub mod loudness;
pub mod matching;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod separation;
pub mod spectral;
pub mod synth;

pub use error::{Error, Result};
