pub mod artifacts;
pub mod backbone;
pub mod coder;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod entropy_models;
pub mod error;
pub mod evalkit;
pub mod feature;
pub mod feature_codec;
pub mod ifmodule;
pub mod nn;
pub mod pipeline;
pub mod presets;
pub mod tasks;

pub use error::{Error, Result};
pub use feature::FeatureMap;
