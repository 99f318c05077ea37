pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dsp;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod features;
pub mod manifest;
pub mod mmts;
pub mod pipeline;
pub mod series;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use series::{SegmentRef, TimeSeries};
