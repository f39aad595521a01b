//! Model checkpoints: the binary `HSTCKPT1` container with a TOML metadata
//! string holding the model configuration and the training step.

use std::path::Path;

use anyhow::{Context, Result};
use hst_core::model::HumanSceneTransformer;
use hst_core::numerics::Checkpoint;
use serde::{Deserialize, Serialize};

use crate::config::ModelSection;
use crate::fsio;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    step: usize,
    model: ModelSection,
}

pub fn encode_model(model: &HumanSceneTransformer, step: usize) -> Vec<u8> {
    let meta = Metadata {
        step,
        model: ModelSection::from_config(&model.config),
    };
    let text = toml::to_string(&meta).expect("metadata serializes");
    Checkpoint::from_store(&model.params, &text).encode()
}

/// Returns the model and the number of optimizer steps it was trained for.
pub fn decode_model(bytes: &[u8]) -> Result<(HumanSceneTransformer, usize)> {
    let ckpt = Checkpoint::decode(bytes)?;
    let meta: Metadata = toml::from_str(&ckpt.metadata).context("checkpoint metadata")?;
    let mut model = HumanSceneTransformer::new(meta.model.resolve()?, 0)?;
    model.load_params(&ckpt.params)?;
    Ok((model, meta.step))
}

pub fn save_model(path: &Path, model: &HumanSceneTransformer, step: usize) -> Result<()> {
    fsio::write_atomic(path, &encode_model(model, step))
}

pub fn load_model(path: &Path) -> Result<(HumanSceneTransformer, usize)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    decode_model(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
}
