//! Parameter and FLOPs accounting.
//!
//! Parameter counts exclude the embedding tables (and an untied generation
//! head) by default because those scale with the vocabulary. Tensors under
//! the `gct.` prefix belong to the grouping classifier, not the network, and
//! are never counted.
//!
//! FLOPs are analytic: every dense product contributes its multiply-accumulate
//! count and one MAC is two FLOPs. Per attention block with `w = heads·d_k`,
//! query length `Tq` and key length `Tk`:
//!
//! ```text
//! projections   Tq·d·w + 2·Tk·d·w + Tq·w·d
//! scores        Tq·Tk·w
//! weighted sum  Tq·Tk·w
//! ```
//!
//! Each feed-forward block costs `2·T·d·d_ff`, the generation head `T·d·V`.
//! Source and target lengths are both the given input length.

use serde::{Deserialize, Serialize};

use crate::model::{Architecture, ModelConfig, TransformerModel};
use crate::numerics::Real;

fn is_embedding(name: &str) -> bool {
    name.starts_with("embed.") || name == "out.proj"
}

/// Exact sum of parameter extents.
pub fn count_params<T: Real>(model: &TransformerModel<T>, exclude_embeddings: bool) -> usize {
    model.params.count_where(|n| !n.starts_with("gct.") && !(exclude_embeddings && is_embedding(n)))
}

/// Closed-form parameter count for `config` with `site_heads[s]` heads kept
/// at each attention site.
pub fn closed_form_params(config: &ModelConfig, site_heads: &[usize], exclude_embeddings: bool) -> usize {
    let d = config.d_model;
    let dk = config.head_dim();
    let attention: usize = site_heads
        .iter()
        .map(|&h| {
            let w = h * dk;
            3 * (d * w + w) + w * d + d
        })
        .sum();
    let ln = 2 * d;
    let ffn = d * config.d_ff + config.d_ff + config.d_ff * d + d;
    let n = config.layers;
    let (stacks, enc_dec) = match config.architecture {
        Architecture::EncoderDecoder => (n * (2 * ln + ffn) + n * (3 * ln + ffn) + 2 * ln, true),
        Architecture::DecoderOnly => (n * (2 * ln + ffn) + ln, false),
    };
    let mut total = attention + stacks;
    if !exclude_embeddings {
        let tables = if enc_dec { 2 } else { 1 };
        total += tables * config.vocab * d;
        if !config.tie_embeddings {
            total += d * config.vocab;
        }
    }
    total
}

/// Analytic FLOPs for one forward pass at `input_len` tokens per sequence.
pub fn estimate_flops<T: Real>(model: &TransformerModel<T>, input_len: usize) -> u64 {
    flops_for(&model.config, model.site_heads(), input_len)
}

pub fn flops_for(config: &ModelConfig, site_heads: &[usize], input_len: usize) -> u64 {
    let d = config.d_model as u64;
    let dk = config.head_dim() as u64;
    let t = input_len as u64;
    let attention: u64 = site_heads
        .iter()
        .map(|&h| {
            let w = h as u64 * dk;
            let proj = t * d * w + 2 * t * d * w + t * w * d;
            proj + 2 * t * t * w
        })
        .sum();
    let ffn_blocks = match config.architecture {
        Architecture::EncoderDecoder => 2 * config.layers as u64,
        Architecture::DecoderOnly => config.layers as u64,
    };
    let ffn = ffn_blocks * 2 * t * d * config.d_ff as u64;
    let head = t * d * config.vocab as u64;
    2 * (attention + ffn + head)
}

/// Projection parameters (Q, K, V and output weights) of one attention site.
pub fn attention_projection_weights(config: &ModelConfig, heads: usize) -> usize {
    4 * config.d_model * heads * config.head_dim()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub non_embedding_params: usize,
    pub flops: u64,
    pub input_len: usize,
    pub heads_per_layer: Vec<usize>,
}

impl EfficiencyReport {
    pub fn of<T: Real>(model: &TransformerModel<T>, input_len: usize) -> Self {
        Self {
            non_embedding_params: count_params(model, true),
            flops: estimate_flops(model, input_len),
            input_len,
            heads_per_layer: model.site_heads().to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadMask;

    fn two_per_layer(model: &TransformerModel<f32>) -> HeadMask {
        let mut m = HeadMask::all_ones(model.sites().len(), model.config.heads);
        for l in &mut m.layers {
            l.iter_mut().skip(2).for_each(|b| *b = false);
        }
        m
    }

    #[test]
    fn closed_form_matches_store_for_presets() {
        for cfg in [
            ModelConfig::tiny(20),
            ModelConfig::small(20),
            ModelConfig { tie_embeddings: false, architecture: Architecture::DecoderOnly, ..ModelConfig::tiny(20) },
        ] {
            let m = TransformerModel::<f32>::init(cfg.clone(), 0).unwrap();
            for excl in [true, false] {
                assert_eq!(count_params(&m, excl), closed_form_params(&cfg, m.site_heads(), excl));
            }
        }
    }

    #[test]
    fn pruned_count_matches_closed_form() {
        let m = TransformerModel::<f32>::init(ModelConfig::small(20), 0).unwrap();
        let p = m.structural_prune(&two_per_layer(&m), 2).unwrap();
        assert_eq!(count_params(&p, true), closed_form_params(&p.config, p.site_heads(), true));
        assert!(count_params(&p, true) < count_params(&m, true));
    }

    #[test]
    fn all_ones_prune_keeps_count() {
        let m = TransformerModel::<f32>::init(ModelConfig::tiny(20), 0).unwrap();
        let mask = HeadMask::all_ones(m.sites().len(), 4);
        let p = m.structural_prune(&mask, 4).unwrap();
        assert_eq!(count_params(&p, true), count_params(&m, true));
    }

    #[test]
    fn flops_monotone_and_linear_in_ffn() {
        let cfg = ModelConfig::tiny(20);
        let full = vec![4; 6];
        let base = flops_for(&cfg, &full, 30);
        assert!(flops_for(&cfg, &[2; 6], 30) < base);
        let wide = ModelConfig { d_ff: 2 * cfg.d_ff, ..cfg.clone() };
        let ffn = 2 * 4 * 2 * 30 * 64 * 256u64;
        assert_eq!(flops_for(&wide, &full, 30) - base, ffn);
    }
}
