pub mod adapters;
pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod lang_decoder;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod refiner;
pub mod system;
pub mod training;

pub use config::{Lang, ModelConfig, SpecialTokens};
pub use error::{Error, Result};
