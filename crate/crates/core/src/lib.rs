pub mod audio;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod model;
pub mod objectives;
pub mod params;
pub mod pooling;
pub mod synth;
pub mod trainer;
pub mod trunk;

pub use error::{Error, Result};
