pub mod autodiff;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod fusion;
pub mod layers;
pub mod params;
pub mod stats;
pub mod structures;
pub mod training;

pub use error::{Error, Result};
