//! Multi-head attention with per-head feature-map capture and head masking.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::c;
use crate::numerics::{BoundParams, Graph, Real, Tensor, Var};

/// Per-head intermediate a head exposes for grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FmKind {
    /// Projected values V̂.
    Value,
    /// Post-softmax attention weights A.
    Attention,
    /// Head outputs O before the output projection.
    Output,
}

impl FmKind {
    pub const ALL: [FmKind; 3] = [FmKind::Value, FmKind::Attention, FmKind::Output];

    pub fn code(self) -> u8 {
        match self {
            FmKind::Value => 0,
            FmKind::Attention => 1,
            FmKind::Output => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            FmKind::Value => "value",
            FmKind::Attention => "attention",
            FmKind::Output => "output",
        }
    }
}

impl std::str::FromStr for FmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "value" | "v" => Ok(FmKind::Value),
            "attention" | "a" => Ok(FmKind::Attention),
            "output" | "o" => Ok(FmKind::Output),
            other => Err(Error::config("fm", format!("unknown feature map `{other}`"))),
        }
    }
}

/// Graph handles to one attention block's feature maps, all laid out
/// `[batch, heads, seq, ·]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionCapture {
    /// `[B, h, Tk, d_k]`
    pub value: Var,
    /// `[B, h, Tq, Tk]`
    pub attention: Var,
    /// `[B, h, Tq, d_k]`
    pub output: Var,
}

impl AttentionCapture {
    pub fn get(&self, kind: FmKind) -> Var {
        match kind {
            FmKind::Value => self.value,
            FmKind::Attention => self.attention,
            FmKind::Output => self.output,
        }
    }
}

/// Owned copies of one block's feature maps, detached from any graph.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatureMaps<T> {
    pub value: Tensor<T>,
    pub attention: Tensor<T>,
    pub output: Tensor<T>,
}

impl<T: Real> LayerFeatureMaps<T> {
    pub fn get(&self, kind: FmKind) -> &Tensor<T> {
        match kind {
            FmKind::Value => &self.value,
            FmKind::Attention => &self.attention,
            FmKind::Output => &self.output,
        }
    }

    pub fn heads(&self) -> usize {
        self.value.shape()[1]
    }
}

/// Feature maps of every attention block from one forward pass, in site order.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadFeatureMaps<T> {
    pub layers: Vec<LayerFeatureMaps<T>>,
}

impl<T: Real> HeadFeatureMaps<T> {
    pub fn capture(graph: &Graph<T>, captures: &[AttentionCapture]) -> Self {
        Self {
            layers: captures
                .iter()
                .map(|c| LayerFeatureMaps {
                    value: graph.value(c.value).clone(),
                    attention: graph.value(c.attention).clone(),
                    output: graph.value(c.output).clone(),
                })
                .collect(),
        }
    }
}

/// Seeded source of dropout masks. `None` seed means evaluation mode.
#[derive(Debug, Clone)]
pub struct DropoutStream {
    seed: Option<u64>,
    calls: u64,
}

impl DropoutStream {
    pub fn eval() -> Self {
        Self { seed: None, calls: 0 }
    }

    pub fn train(seed: u64) -> Self {
        Self { seed: Some(seed), calls: 0 }
    }

    pub fn is_training(&self) -> bool {
        self.seed.is_some()
    }

    /// Inverted dropout with keep-scale `1/(1-rate)`.
    pub fn apply<T: Real>(&mut self, g: &mut Graph<T>, x: Var, rate: f64) -> Result<Var> {
        let Some(seed) = self.seed else { return Ok(x) };
        if rate <= 0.0 {
            return Ok(x);
        }
        self.calls += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ self.calls.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let keep: T = c(1.0 / (1.0 - rate));
        let shape = g.shape(x).to_vec();
        let n = shape.iter().product();
        let data = (0..n).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
        let mask = g.constant(Tensor::new(shape, data)?);
        g.mul(x, mask)
    }
}

/// Shapes and masks for one attention call.
#[derive(Debug, Clone, Copy)]
pub struct MhaInput<'a> {
    /// `[B·Tq, d_model]`
    pub query: Var,
    /// `[B·Tk, d_model]`
    pub key_value: Var,
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// `[B·Tk]`, true where the key is padding.
    pub key_padding: &'a [bool],
    pub causal: bool,
}

/// Multi-head attention: per-head scaled dot-product attention, head outputs
/// concatenated and projected by the shared output matrix. Heads whose
/// `head_mask` entry is false have their output zeroed before concatenation.
#[allow(clippy::too_many_arguments)]
pub fn mha_forward<T: Real>(
    g: &mut Graph<T>,
    params: &BoundParams,
    prefix: &str,
    heads: usize,
    head_dim: usize,
    input: MhaInput<'_>,
    head_mask: Option<&[bool]>,
    dropout: &mut DropoutStream,
    attention_dropout: f64,
) -> Result<(Var, AttentionCapture)> {
    let MhaInput { query, key_value, batch, q_len, k_len, key_padding, causal } = input;
    if let Some(m) = head_mask {
        if m.len() != heads {
            return Err(Error::shape("head_mask", &[heads], &[m.len()]));
        }
    }
    if key_padding.len() != batch * k_len {
        return Err(Error::shape("key_padding", &[batch * k_len], &[key_padding.len()]));
    }
    if g.shape(query).first() != Some(&(batch * q_len)) || g.shape(key_value).first() != Some(&(batch * k_len)) {
        return Err(Error::shape("mha_input", g.shape(query), g.shape(key_value)));
    }
    let width = heads * head_dim;

    let project = |g: &mut Graph<T>, x: Var, name: &str, len: usize| -> Result<Var> {
        let w = params.var(&format!("{prefix}.{name}.w"))?;
        let b = params.var(&format!("{prefix}.{name}.b"))?;
        let y = g.matmul(x, w)?;
        let y = g.add_bias(y, b)?;
        let y = g.reshape(y, &[batch, len, heads, head_dim])?;
        g.permute(y, &[0, 2, 1, 3])
    };
    let q4 = project(g, query, "q", q_len)?;
    let k4 = project(g, key_value, "k", k_len)?;
    let v4 = project(g, key_value, "v", k_len)?;
    let q = g.reshape(q4, &[batch * heads, q_len, head_dim])?;
    let k = g.reshape(k4, &[batch * heads, k_len, head_dim])?;
    let v = g.reshape(v4, &[batch * heads, k_len, head_dim])?;

    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, c(1.0 / (head_dim as f64).sqrt()));
    let mut mask = vec![false; batch * heads * q_len * k_len];
    let mut any = false;
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..q_len {
                for j in 0..k_len {
                    if key_padding[b * k_len + j] || (causal && j > i) {
                        mask[((b * heads + h) * q_len + i) * k_len + j] = true;
                        any = true;
                    }
                }
            }
        }
    }
    let scores = if any { g.mask_fill_neg_inf(scores, Rc::new(mask))? } else { scores };
    let attn = g.softmax(scores, 2)?;
    let attn_used = dropout.apply(g, attn, attention_dropout)?;
    let out = g.bmm(attn_used, v, false)?;

    let capture = AttentionCapture {
        value: v4,
        attention: g.reshape(attn, &[batch, heads, q_len, k_len])?,
        output: g.reshape(out, &[batch, heads, q_len, head_dim])?,
    };

    let mut heads_out = capture.output;
    if let Some(m) = head_mask {
        if m.iter().any(|&keep| !keep) {
            let mut data = Vec::with_capacity(batch * heads * q_len * head_dim);
            for _ in 0..batch {
                for &keep in m {
                    let v = if keep { T::one() } else { T::zero() };
                    data.extend(std::iter::repeat_n(v, q_len * head_dim));
                }
            }
            let mask = g.constant(Tensor::new(vec![batch, heads, q_len, head_dim], data)?);
            heads_out = g.mul(heads_out, mask)?;
        }
    }
    let concat = g.permute(heads_out, &[0, 2, 1, 3])?;
    let concat = g.reshape(concat, &[batch * q_len, width])?;
    let w_out = params.var(&format!("{prefix}.out.w"))?;
    let b_out = params.var(&format!("{prefix}.out.b"))?;
    let y = g.matmul(concat, w_out)?;
    let y = g.add_bias(y, b_out)?;
    Ok((y, capture))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamStore;

    fn identity_block(d: usize) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        for name in ["q", "k", "v", "out"] {
            p.insert(format!("att.{name}.w"), Tensor::identity(d));
            p.insert(format!("att.{name}.b"), Tensor::zeros(&[d]));
        }
        p
    }

    fn run(
        p: &ParamStore<f64>,
        heads: usize,
        q: Tensor<f64>,
        kv: Tensor<f64>,
        mask: Option<&[bool]>,
    ) -> (Tensor<f64>, Tensor<f64>) {
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let (qn, kn) = (q.shape()[0], kv.shape()[0]);
        let d = q.shape()[1];
        let qv = g.constant(q);
        let kvv = g.constant(kv);
        let pad = vec![false; kn];
        let input =
            MhaInput { query: qv, key_value: kvv, batch: 1, q_len: qn, k_len: kn, key_padding: &pad, causal: false };
        let (y, cap) =
            mha_forward(&mut g, &bound, "att", heads, d / heads, input, mask, &mut DropoutStream::eval(), 0.0).unwrap();
        (g.value(y).clone(), g.value(cap.attention).clone())
    }

    #[test]
    fn single_key_passes_value_through() {
        let p = identity_block(2);
        let row = Tensor::from_f64(&[1, 2], &[0.3, -1.2]).unwrap();
        let (y, a) = run(&p, 1, row.clone(), row.clone(), None);
        assert_eq!(a.data(), &[1.0]);
        assert!(y.max_abs_diff(&row) < 1e-15);
    }

    #[test]
    fn identical_keys_split_evenly() {
        let p = identity_block(2);
        let q = Tensor::from_f64(&[1, 2], &[1.0, 0.5]).unwrap();
        let kv = Tensor::from_f64(&[2, 2], &[0.2, 0.7, 0.2, 0.7]).unwrap();
        let (_, a) = run(&p, 1, q, kv, None);
        assert_eq!(a.data(), &[0.5, 0.5]);
    }

    #[test]
    fn masked_head_contributes_nothing() {
        let p = identity_block(4);
        let q = Tensor::from_f64(&[2, 4], &[1.0, 0.5, -0.2, 0.3, 0.1, 0.9, 0.4, -0.6]).unwrap();
        let (full, _) = run(&p, 2, q.clone(), q.clone(), None);
        let (masked, _) = run(&p, 2, q.clone(), q.clone(), Some(&[true, false]));
        // identity W_out: head 1 occupies the last two columns
        for r in 0..2 {
            assert_eq!(&masked.row(r)[..2], &full.row(r)[..2]);
            assert_eq!(&masked.row(r)[2..], &[0.0, 0.0]);
        }
        assert_ne!(masked, full);
        let (ones, _) = run(&p, 2, q.clone(), q, Some(&[true, true]));
        assert_eq!(ones, full);
    }

    #[test]
    fn wrong_mask_length_is_rejected() {
        let p = identity_block(2);
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, 2]));
        let pad = [false];
        let input = MhaInput { query: x, key_value: x, batch: 1, q_len: 1, k_len: 1, key_padding: &pad, causal: false };
        let err = mha_forward(&mut g, &bound, "att", 1, 2, input, Some(&[true, true]), &mut DropoutStream::eval(), 0.0);
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn dropout_is_seeded() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[64]));
        let a = DropoutStream::train(5).apply(&mut g, x, 0.5).unwrap();
        let b = DropoutStream::train(5).apply(&mut g, x, 0.5).unwrap();
        assert_eq!(g.value(a), g.value(b));
        let zeros = g.value(a).data().iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 10 && zeros < 54);
        assert!(g.value(a).data().iter().all(|&v| v == 0.0 || v == 2.0));
        let e = DropoutStream::eval().apply(&mut g, x, 0.5).unwrap();
        assert_eq!(e, x);
    }
}
