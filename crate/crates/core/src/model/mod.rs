//! Transformer assembly with per-head feature-map capture, head masking,
//! structural head removal and checkpoints.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod transformer;

pub use attention::{
    mha_forward, AttentionCapture, DropoutStream, FmKind, HeadFeatureMaps, LayerFeatureMaps, MhaInput,
};
pub use checkpoint::{write_atomic, Checkpoint};
pub use config::{Architecture, AttentionKind, AttentionSite, ModelConfig};
pub use transformer::{ForwardOutput, HeadMask, TokenBatch, TransformerModel, BOS, EOS, FIRST_SYMBOL, PAD};
