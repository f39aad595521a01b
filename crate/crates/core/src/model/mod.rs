//! The trajectory prediction network.
//!
//! Data flow: per-stream feature encoders pooled by a learned query, agent
//! self-alignment along time, `K` attention layers over all agent-timestep
//! tokens, optional cross-attention to occupancy patches, tiling over `M`
//! modes with learned mode identifiers, `L` more attention layers per mode,
//! and a dense head emitting a diagonal Gaussian per agent, step and mode.

mod config;
mod network;
mod prediction;

pub use config::{ModelConfig, Protocol};
pub use network::{
    occupancy_patches, planar_embedding, sinusoid, timestep_embedding, ForwardOutput, HumanSceneTransformer, ModelInputs,
};
pub use prediction::GmmPrediction;
