pub mod config;
pub mod data;
pub mod diff;
pub mod error;
pub mod explain;
pub mod fusion;
pub mod image;
pub mod params;
pub mod pipeline;
pub mod radiomics;
pub mod scalar;
pub mod select;
pub mod tabular;
pub mod train;
pub mod volume;

pub use error::{Error, ErrorClass, Result};

pub type Tensor = diff::Tensor<f64>;
pub type Tape = diff::Tape<f64>;
pub type ParamStore = params::ParamStore<f64>;
pub type FusionModel = fusion::FusionModel<f64>;
