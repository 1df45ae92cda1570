//! Modality shifting attention network for multimodal (video + subtitle)
//! multiple-choice question answering.

pub mod checks;
pub mod data;
pub mod encoder;
pub mod error;
pub mod hrn;
pub mod mlp;
pub mod model;
pub mod mpn;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{ForwardOptions, ForwardOutput, ModelConfig, MomentSource, Msan};
