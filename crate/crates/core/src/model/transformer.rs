//! Pre-norm transformer assembly, head masks and structural head removal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::attention::{mha_forward, AttentionCapture, DropoutStream, HeadFeatureMaps, MhaInput};
use super::config::{Architecture, AttentionKind, AttentionSite, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::tensor::c;
use crate::numerics::{BoundParams, Graph, ParamStore, Real, Tensor, Var};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First id available for task symbols.
pub const FIRST_SYMBOL: usize = 3;

/// Per-site binary keep vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadMask {
    pub layers: Vec<Vec<bool>>,
}

impl HeadMask {
    pub fn all_ones(sites: usize, heads: usize) -> Self {
        Self { layers: vec![vec![true; heads]; sites] }
    }

    pub fn kept(&self, layer: usize) -> usize {
        self.layers[layer].iter().filter(|&&b| b).count()
    }

    /// Every masked layer keeps exactly `groups` heads; layers left
    /// untouched (all ones) are allowed.
    pub fn is_complete(&self, groups: usize) -> bool {
        (0..self.layers.len()).all(|l| self.kept(l) == groups || self.kept(l) == self.layers[l].len())
    }

    pub fn kept_indices(&self, layer: usize) -> Vec<usize> {
        self.layers[layer].iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect()
    }
}

/// Token ids for one batch, row-major `[batch, len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    /// Empty for decoder-only models.
    pub src: Vec<usize>,
    /// Decoder input (begins with BOS).
    pub tgt_in: Vec<usize>,
}

pub struct ForwardOutput {
    /// `[B·Tt, vocab]`
    pub logits: Var,
    pub captures: Vec<AttentionCapture>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    /// Heads currently present at each site (shrinks after structural pruning).
    site_heads: Vec<usize>,
    /// Original head index of every head present at each site.
    head_ids: Vec<Vec<usize>>,
    mask: Option<HeadMask>,
}

/// `None` leaves the tensor zeroed.
fn xavier<T: Real>(rng: &mut Option<ChaCha8Rng>, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let Some(rng) = rng else {
        return Tensor::zeros(&[fan_in, fan_out]);
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| c(rng.random_range(-bound..bound))).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("xavier shape")
}

fn normal<T: Real>(rng: &mut Option<ChaCha8Rng>, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    let Some(rng) = rng else {
        return Tensor::zeros(&[rows, cols]);
    };
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| c(dist.sample(rng))).collect();
    Tensor::new(vec![rows, cols], data).expect("normal shape")
}

impl<T: Real> TransformerModel<T> {
    /// Fresh model with Xavier-uniform projections, zero biases, unit
    /// layer-norm gains and `N(0, d^-1/2)` embeddings.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, Some(ChaCha8Rng::seed_from_u64(seed)))
    }

    /// Same layout as [`init`](Self::init) with the random draws left at zero. Cheap
    /// enough for parameter and FLOPs accounting of large configs.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        Self::build(config, None)
    }

    fn build(config: ModelConfig, mut rng: Option<ChaCha8Rng>) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut p = ParamStore::new();
        let emb_std = (d as f64).powf(-0.5);
        if config.architecture == Architecture::EncoderDecoder {
            p.insert("embed.src", normal(&mut rng, config.vocab, d, emb_std));
        }
        p.insert("embed.tgt", normal(&mut rng, config.vocab, d, emb_std));

        let ln = |p: &mut ParamStore<T>, name: &str| {
            p.insert(format!("{name}.g"), Tensor::ones(&[d]));
            p.insert(format!("{name}.b"), Tensor::zeros(&[d]));
        };
        let attn = |p: &mut ParamStore<T>, rng: &mut Option<ChaCha8Rng>, prefix: &str| {
            for proj in ["q", "k", "v"] {
                p.insert(format!("{prefix}.{proj}.w"), xavier(rng, d, d));
                p.insert(format!("{prefix}.{proj}.b"), Tensor::zeros(&[d]));
            }
            p.insert(format!("{prefix}.out.w"), xavier(rng, d, d));
            p.insert(format!("{prefix}.out.b"), Tensor::zeros(&[d]));
        };
        let ffn = |p: &mut ParamStore<T>, rng: &mut Option<ChaCha8Rng>, prefix: &str| {
            p.insert(format!("{prefix}.ffn.w1"), xavier(rng, d, config.d_ff));
            p.insert(format!("{prefix}.ffn.b1"), Tensor::zeros(&[config.d_ff]));
            p.insert(format!("{prefix}.ffn.w2"), xavier(rng, config.d_ff, d));
            p.insert(format!("{prefix}.ffn.b2"), Tensor::zeros(&[d]));
        };

        if config.architecture == Architecture::EncoderDecoder {
            for l in 0..config.layers {
                ln(&mut p, &format!("enc.{l}.ln1"));
                attn(&mut p, &mut rng, &format!("enc.{l}.self"));
                ln(&mut p, &format!("enc.{l}.ln2"));
                ffn(&mut p, &mut rng, &format!("enc.{l}"));
            }
            ln(&mut p, "enc.ln");
        }
        for l in 0..config.layers {
            ln(&mut p, &format!("dec.{l}.ln1"));
            attn(&mut p, &mut rng, &format!("dec.{l}.self"));
            if config.architecture == Architecture::EncoderDecoder {
                ln(&mut p, &format!("dec.{l}.ln2"));
                attn(&mut p, &mut rng, &format!("dec.{l}.cross"));
            }
            ln(&mut p, &format!("dec.{l}.ln3"));
            ffn(&mut p, &mut rng, &format!("dec.{l}"));
        }
        ln(&mut p, "dec.ln");
        if !config.tie_embeddings {
            p.insert("out.proj", xavier(&mut rng, d, config.vocab));
        }

        let sites = config.attention_sites().len();
        Ok(Self {
            site_heads: vec![config.heads; sites],
            head_ids: vec![(0..config.heads).collect(); sites],
            config,
            params: p,
            mask: None,
        })
    }

    /// Reassembles a model from stored parts, checking parameter shapes.
    pub fn from_parts(
        config: ModelConfig,
        params: ParamStore<T>,
        head_ids: Vec<Vec<usize>>,
        mask: Option<HeadMask>,
    ) -> Result<Self> {
        config.validate()?;
        let reference = Self::init(config.clone(), 0)?;
        if head_ids.len() != reference.sites().len() {
            return Err(Error::contract("head-id table does not match attention sites"));
        }
        let mut model =
            Self { site_heads: head_ids.iter().map(Vec::len).collect(), head_ids, config, params, mask: None };
        for (name, t) in reference.params.iter() {
            let got = model.params.get(name)?;
            let expect = model.expected_shape(name, t.shape());
            if got.shape() != expect.as_slice() {
                return Err(Error::shape("from_parts", &expect, got.shape()));
            }
        }
        if let Some(m) = mask {
            model.apply_head_mask(m)?;
        }
        Ok(model)
    }

    fn expected_shape(&self, name: &str, full: &[usize]) -> Vec<usize> {
        let dk = self.config.head_dim();
        for (s, site) in self.sites().iter().enumerate() {
            let prefix = site.prefix();
            let Some(rest) = name.strip_prefix(&prefix) else {
                continue;
            };
            let width = self.site_heads[s] * dk;
            return match rest {
                ".q.w" | ".k.w" | ".v.w" => vec![full[0], width],
                ".q.b" | ".k.b" | ".v.b" => vec![width],
                ".out.w" => vec![width, full[1]],
                _ => full.to_vec(),
            };
        }
        full.to_vec()
    }

    pub fn sites(&self) -> Vec<AttentionSite> {
        self.config.attention_sites()
    }

    pub fn site_heads(&self) -> &[usize] {
        &self.site_heads
    }

    pub fn head_ids(&self) -> &[Vec<usize>] {
        &self.head_ids
    }

    pub fn mask(&self) -> Option<&HeadMask> {
        self.mask.as_ref()
    }

    pub fn is_pruned(&self) -> bool {
        self.site_heads.iter().any(|&h| h != self.config.heads)
    }

    /// Installs `mask`; later forwards zero the masked heads' outputs.
    pub fn apply_head_mask(&mut self, mask: HeadMask) -> Result<()> {
        if mask.layers.len() != self.site_heads.len() {
            return Err(Error::shape("apply_head_mask", &[self.site_heads.len()], &[mask.layers.len()]));
        }
        for (l, m) in mask.layers.iter().enumerate() {
            if m.len() != self.site_heads[l] {
                return Err(Error::shape("apply_head_mask", &[self.site_heads[l]], &[m.len()]));
            }
        }
        self.mask = Some(mask);
        Ok(())
    }

    pub fn clear_head_mask(&mut self) -> Option<HeadMask> {
        self.mask.take()
    }

    /// Removes masked heads: their Q/K/V column blocks and their rows of the
    /// shared output projection. Requires every masked layer to keep `groups` heads.
    pub fn structural_prune(&self, mask: &HeadMask, groups: usize) -> Result<Self> {
        if mask.layers.len() != self.site_heads.len() {
            return Err(Error::shape("structural_prune", &[self.site_heads.len()], &[mask.layers.len()]));
        }
        if !mask.is_complete(groups) {
            return Err(Error::contract(format!("mask does not keep exactly {groups} heads in every masked layer")));
        }
        let dk = self.config.head_dim();
        let mut pruned = self.clone();
        pruned.mask = None;
        for (s, site) in self.sites().iter().enumerate() {
            if mask.layers[s].len() != self.site_heads[s] {
                return Err(Error::shape("structural_prune", &[self.site_heads[s]], &[mask.layers[s].len()]));
            }
            let keep = mask.kept_indices(s);
            let prefix = site.prefix();
            for proj in ["q", "k", "v"] {
                let w = self.params.get(&format!("{prefix}.{proj}.w"))?;
                pruned.params.insert(format!("{prefix}.{proj}.w"), gather_column_blocks(w, &keep, dk)?);
                let b = self.params.get(&format!("{prefix}.{proj}.b"))?;
                let b2 = b.clone().reshape(&[1, b.len()])?;
                let kept = gather_column_blocks(&b2, &keep, dk)?;
                pruned.params.insert(format!("{prefix}.{proj}.b"), kept.reshape(&[keep.len() * dk])?);
            }
            let w = self.params.get(&format!("{prefix}.out.w"))?;
            pruned.params.insert(format!("{prefix}.out.w"), gather_row_blocks(w, &keep, dk)?);
            pruned.site_heads[s] = keep.len();
            pruned.head_ids[s] = keep.iter().map(|&i| self.head_ids[s][i]).collect();
        }
        Ok(pruned)
    }

    /// Differentiable forward pass on `g`. Feature maps of every attention
    /// site are returned in site order.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        params: &BoundParams,
        batch: &TokenBatch,
        dropout: &mut DropoutStream,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let dk = cfg.head_dim();
        let b = batch.batch;
        if batch.tgt_in.len() != b * batch.tgt_len {
            return Err(Error::shape("forward.tgt", &[b, batch.tgt_len], &[batch.tgt_in.len()]));
        }
        let sites = self.sites();
        let mut captures = Vec::with_capacity(sites.len());
        let mut site_idx = 0usize;

        let mut attend = |g: &mut Graph<T>,
                          dropout: &mut DropoutStream,
                          captures: &mut Vec<AttentionCapture>,
                          input: MhaInput<'_>|
         -> Result<Var> {
            let s = site_idx;
            site_idx += 1;
            let prefix = sites[s].prefix();
            let mask = self.mask.as_ref().map(|m| m.layers[s].as_slice());
            let (y, cap) =
                mha_forward(g, params, &prefix, self.site_heads[s], dk, input, mask, dropout, cfg.attention_dropout)?;
            captures.push(cap);
            Ok(y)
        };

        let enc_out = if cfg.architecture == Architecture::EncoderDecoder {
            if batch.src.len() != b * batch.src_len {
                return Err(Error::shape("forward.src", &[b, batch.src_len], &[batch.src.len()]));
            }
            let pad: Vec<bool> = batch.src.iter().map(|&t| t == PAD).collect();
            let mut x = self.embed(g, params, "embed.src", &batch.src, b, batch.src_len)?;
            x = dropout.apply(g, x, cfg.dropout)?;
            for l in 0..cfg.layers {
                let h = self.ln(g, params, x, &format!("enc.{l}.ln1"))?;
                let a = attend(
                    g,
                    dropout,
                    &mut captures,
                    MhaInput {
                        query: h,
                        key_value: h,
                        batch: b,
                        q_len: batch.src_len,
                        k_len: batch.src_len,
                        key_padding: &pad,
                        causal: false,
                    },
                )?;
                let a = dropout.apply(g, a, cfg.dropout)?;
                x = g.add(x, a)?;
                let h = self.ln(g, params, x, &format!("enc.{l}.ln2"))?;
                let f = self.ffn(g, params, h, &format!("enc.{l}"), dropout)?;
                x = g.add(x, f)?;
            }
            Some((self.ln(g, params, x, "enc.ln")?, pad))
        } else {
            None
        };

        let tgt_pad: Vec<bool> = batch.tgt_in.iter().map(|&t| t == PAD).collect();
        let mut y = self.embed(g, params, "embed.tgt", &batch.tgt_in, b, batch.tgt_len)?;
        y = dropout.apply(g, y, cfg.dropout)?;
        for l in 0..cfg.layers {
            let h = self.ln(g, params, y, &format!("dec.{l}.ln1"))?;
            let a = attend(
                g,
                dropout,
                &mut captures,
                MhaInput {
                    query: h,
                    key_value: h,
                    batch: b,
                    q_len: batch.tgt_len,
                    k_len: batch.tgt_len,
                    key_padding: &tgt_pad,
                    causal: true,
                },
            )?;
            let a = dropout.apply(g, a, cfg.dropout)?;
            y = g.add(y, a)?;
            if let Some((enc, src_pad)) = &enc_out {
                let h = self.ln(g, params, y, &format!("dec.{l}.ln2"))?;
                let a = attend(
                    g,
                    dropout,
                    &mut captures,
                    MhaInput {
                        query: h,
                        key_value: *enc,
                        batch: b,
                        q_len: batch.tgt_len,
                        k_len: batch.src_len,
                        key_padding: src_pad,
                        causal: false,
                    },
                )?;
                let a = dropout.apply(g, a, cfg.dropout)?;
                y = g.add(y, a)?;
            }
            let h = self.ln(g, params, y, &format!("dec.{l}.ln3"))?;
            let f = self.ffn(g, params, h, &format!("dec.{l}"), dropout)?;
            y = g.add(y, f)?;
        }
        let y = self.ln(g, params, y, "dec.ln")?;
        let head = if cfg.tie_embeddings {
            let e = params.var("embed.tgt")?;
            g.permute(e, &[1, 0])?
        } else {
            params.var("out.proj")?
        };
        let logits = g.matmul(y, head)?;
        Ok(ForwardOutput { logits, captures })
    }

    /// Evaluation-mode forward returning owned logits `[B·Tt, vocab]` and
    /// feature maps.
    pub fn infer(&self, batch: &TokenBatch) -> Result<(Tensor<T>, HeadFeatureMaps<T>)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &bound, batch, &mut DropoutStream::eval())?;
        let fms = HeadFeatureMaps::capture(&g, &out.captures);
        Ok((g.value(out.logits).clone(), fms))
    }

    fn embed(
        &self,
        g: &mut Graph<T>,
        params: &BoundParams,
        table: &str,
        ids: &[usize],
        batch: usize,
        len: usize,
    ) -> Result<Var> {
        let d = self.config.d_model;
        if len > self.config.max_len {
            return Err(Error::Index { op: "positions", index: len, extent: self.config.max_len });
        }
        let e = g.embedding(params.var(table)?, ids)?;
        let e = g.scale(e, c((d as f64).sqrt()));
        let mut pe = Vec::with_capacity(batch * len * d);
        for _ in 0..batch {
            for pos in 0..len {
                pe.extend(sinusoid_row::<T>(pos, d));
            }
        }
        let pe = g.constant(Tensor::new(vec![batch * len, d], pe)?);
        g.add(e, pe)
    }

    fn ln(&self, g: &mut Graph<T>, params: &BoundParams, x: Var, name: &str) -> Result<Var> {
        let gain = params.var(&format!("{name}.g"))?;
        let bias = params.var(&format!("{name}.b"))?;
        g.layer_norm(x, gain, bias, 1)
    }

    fn ffn(
        &self,
        g: &mut Graph<T>,
        params: &BoundParams,
        x: Var,
        prefix: &str,
        dropout: &mut DropoutStream,
    ) -> Result<Var> {
        let h = g.matmul(x, params.var(&format!("{prefix}.ffn.w1"))?)?;
        let h = g.add_bias(h, params.var(&format!("{prefix}.ffn.b1"))?)?;
        let h = g.relu(h);
        let h = g.matmul(h, params.var(&format!("{prefix}.ffn.w2"))?)?;
        let h = g.add_bias(h, params.var(&format!("{prefix}.ffn.b2"))?)?;
        dropout.apply(g, h, self.config.dropout)
    }
}

fn sinusoid_row<T: Real>(pos: usize, d: usize) -> impl Iterator<Item = T> {
    (0..d).map(move |j| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
        c(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

fn gather_column_blocks<T: Real>(w: &Tensor<T>, keep: &[usize], block: usize) -> Result<Tensor<T>> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    if keep.iter().any(|&h| (h + 1) * block > cols) {
        return Err(Error::shape("gather_columns", w.shape(), &[keep.len() * block]));
    }
    let mut data = Vec::with_capacity(rows * keep.len() * block);
    for r in 0..rows {
        let row = w.row(r);
        for &h in keep {
            data.extend_from_slice(&row[h * block..(h + 1) * block]);
        }
    }
    Tensor::new(vec![rows, keep.len() * block], data)
}

fn gather_row_blocks<T: Real>(w: &Tensor<T>, keep: &[usize], block: usize) -> Result<Tensor<T>> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    if keep.iter().any(|&h| (h + 1) * block > rows) {
        return Err(Error::shape("gather_rows", w.shape(), &[keep.len() * block]));
    }
    let mut data = Vec::with_capacity(keep.len() * block * cols);
    for &h in keep {
        data.extend_from_slice(&w.data()[h * block * cols..(h + 1) * block * cols]);
    }
    Tensor::new(vec![keep.len() * block, cols], data)
}

/// Whether a site takes part in grouping, given per-kind toggles.
pub fn site_enabled(kind: AttentionKind, encoder_self: bool, decoder_self: bool, cross: bool) -> bool {
    match kind {
        AttentionKind::EncoderSelf => encoder_self,
        AttentionKind::DecoderSelf => decoder_self,
        AttentionKind::Cross => cross,
    }
}
