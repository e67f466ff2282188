//! Interpretable multimodal fusion for classifying client utterances in
//! counselling transcripts as change talk, sustain talk, or neutral.

pub mod artifact;
pub mod autodiff;
pub mod corpus;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod interpret;
pub mod metrics;
pub mod modality;
pub mod model;
pub mod pipeline;
pub mod signal;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use modality::ModalityId;
pub use tensor::Tensor;
