mod binio;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod scorer;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
