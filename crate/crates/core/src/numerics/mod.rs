//! Dense tensors, reverse-mode differentiation, layers and the optimizer.

mod adam;
mod checkpoint;
mod graph;
mod nn;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC};
pub use graph::{GradSink, Gradients, Graph, Var};
pub use nn::{
    dropout, rng_from_seed, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamGrads, ParamId, ParamStore,
    Parameter, Rng, TransformerLayer, LAYER_NORM_EPS,
};
pub use tensor::{Mask, Tensor};
