use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    EncoderDecoder,
    DecoderOnly,
}

/// Transformer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Layers per stack.
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: usize,
    /// Share the decoder input embedding with the generation head.
    pub tie_embeddings: bool,
    pub dropout: f64,
    pub attention_dropout: f64,
    /// Longest sequence the positional table covers.
    pub max_len: usize,
}

impl ModelConfig {
    /// 2+2 layers, d_model 64, 4 heads.
    pub fn tiny(vocab: usize) -> Self {
        Self {
            architecture: Architecture::EncoderDecoder,
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab,
            tie_embeddings: true,
            dropout: 0.0,
            attention_dropout: 0.0,
            max_len: 64,
        }
    }

    /// 4+4 layers, d_model 128, 8 heads.
    pub fn small(vocab: usize) -> Self {
        Self { layers: 4, heads: 8, d_model: 128, d_ff: 512, dropout: 0.1, ..Self::tiny(vocab) }
    }

    /// Transformer-base geometry (6+6, 512, 8 heads, 2048). Used for
    /// parameter and FLOPs accounting only.
    pub fn paper_base() -> Self {
        Self {
            layers: 6,
            heads: 8,
            d_model: 512,
            d_ff: 2048,
            vocab: 32768,
            dropout: 0.3,
            max_len: 256,
            ..Self::tiny(32768)
        }
    }

    pub fn preset(name: &str, vocab: usize) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny(vocab)),
            "small" => Ok(Self::small(vocab)),
            "paper-base" => Ok(Self::paper_base()),
            other => Err(Error::config("model.preset", format!("unknown preset `{other}`"))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.layers", self.layers),
            ("model.heads", self.heads),
            ("model.d_model", self.d_model),
            ("model.d_ff", self.d_ff),
            ("model.vocab", self.vocab),
            ("model.max_len", self.max_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(
                "model.d_model",
                format!("{} not divisible by {} heads", self.d_model, self.heads),
            ));
        }
        for (field, p) in [("model.dropout", self.dropout), ("model.attention_dropout", self.attention_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    /// Attention sites in forward order: encoder self-attention layers, then
    /// for each decoder layer its self-attention followed by cross-attention.
    pub fn attention_sites(&self) -> Vec<AttentionSite> {
        let mut sites = Vec::new();
        if self.architecture == Architecture::EncoderDecoder {
            for layer in 0..self.layers {
                sites.push(AttentionSite { kind: AttentionKind::EncoderSelf, layer });
            }
        }
        for layer in 0..self.layers {
            sites.push(AttentionSite { kind: AttentionKind::DecoderSelf, layer });
            if self.architecture == Architecture::EncoderDecoder {
                sites.push(AttentionSite { kind: AttentionKind::Cross, layer });
            }
        }
        sites
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    EncoderSelf,
    DecoderSelf,
    Cross,
}

/// One multi-head attention block in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttentionSite {
    pub kind: AttentionKind,
    pub layer: usize,
}

impl AttentionSite {
    /// Parameter-name prefix, e.g. `dec.1.cross`.
    pub fn prefix(&self) -> String {
        match self.kind {
            AttentionKind::EncoderSelf => format!("enc.{}.self", self.layer),
            AttentionKind::DecoderSelf => format!("dec.{}.self", self.layer),
            AttentionKind::Cross => format!("dec.{}.cross", self.layer),
        }
    }
}

impl std::fmt::Display for AttentionSite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.prefix())
    }
}
