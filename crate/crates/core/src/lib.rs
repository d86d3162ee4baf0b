pub mod adversarial;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod histogram;
pub mod image;
pub mod metrics;
pub mod nets;
pub mod nn;
pub mod semantic_embedding;
pub mod tensor;
pub mod tensor_file;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{Image, LabelMap};
