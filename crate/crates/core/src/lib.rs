//! Multimodal contrastive embedding pipeline at desk scale.

pub mod audit;
pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod graph;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod params;
pub mod provenance;
pub mod rng;
pub mod serving;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
