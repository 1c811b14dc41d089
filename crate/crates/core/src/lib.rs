pub mod bitstream;
pub mod context;
pub mod contextual_codec;
pub mod entropy_model;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod nn;
pub mod quant;
pub mod training;
pub mod video_io;

pub use error::{Error, Result};
