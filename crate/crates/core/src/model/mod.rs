//! Transformer configuration, parameters, and the forward pass.

mod checkpoint;
mod config;
mod forward;
mod state;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{
    swiglu_width, MlpKind, PlacementKind, PlacementStrategy, PositionKind, TransformerConfig, BYTE_VOCAB, DEFAULT_VOCAB,
};
pub use forward::{
    attention_forward, relu_mlp, silu_glu, sublayer_forward, AttentionShape, AttentionVars, Bound, BoundNorm,
    BoundSublayerNorms, ForwardTrace, TokenBatch,
};
pub use state::{
    init_parameters, AttentionLayout, LayerLayout, Layout, MlpLayout, ModelState, NormPosition, NormSite, Param,
    ParamId, ParamRole, SublayerNorms,
};
