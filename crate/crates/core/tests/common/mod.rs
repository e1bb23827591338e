//! Finite-difference helpers shared by the gradient checks and the
//! acceptance suite.
#![allow(dead_code)]

use gha_core::grouping::{
    classifier_probs, discover_hidden_units, gct_loss_categorical, gct_loss_continuous, pool_tensor, pool_var,
    ContinuousSite, KMeansOptions,
};
use gha_core::harness::{generate, make_batches, TaskSpec};
use gha_core::model::{Architecture, DropoutStream, FmKind, ModelConfig, TransformerModel, PAD};
use gha_core::numerics::{BoundParams, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-6;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GroupLoss {
    Continuous { centroid_grad: bool },
    Categorical,
}

const GROUPS: usize = 2;

/// Task loss plus a group loss through a one-layer encoder-decoder in f64.
/// Checks `per_tensor` random entries of every parameter, or all of them.
/// Returns the relative error and the number of entries checked.
pub fn transformer_gradcheck(loss: GroupLoss, per_tensor: Option<usize>, seed: u64) -> (f64, usize) {
    let spec = TaskSpec { symbols: 5, min_len: 2, max_len: 4, samples: 20, ..TaskSpec::default() };
    let data = generate(&spec, seed).unwrap();
    let batch = make_batches(&data.train, 3, Architecture::EncoderDecoder, data.max_src, data.max_tgt, None).remove(0);
    let config =
        ModelConfig { layers: 1, heads: 4, d_model: 8, d_ff: 12, max_len: 16, ..ModelConfig::tiny(data.vocab) };
    let mut model = TransformerModel::<f64>::init(config, seed).unwrap();
    let sites = model.sites();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if loss == GroupLoss::Categorical {
        for site in &sites {
            let p = site.prefix();
            model.params.insert(format!("gct.{p}.w"), random(&[model.config.head_dim(), GROUPS], &mut rng));
            model.params.insert(format!("gct.{p}.b"), random(&[GROUPS], &mut rng));
        }
    }

    // Fixed assignment from the initial value feature maps.
    let (_, fms) = model.infer(&batch.batch).unwrap();
    let units: Vec<(Vec<usize>, Vec<Vec<f64>>)> = (0..sites.len())
        .map(|s| {
            let pts = pool_tensor(fms.layers[s].get(FmKind::Value)).unwrap();
            let c = discover_hidden_units(&pts, GROUPS, KMeansOptions::default()).unwrap();
            (c.labels, c.centroids)
        })
        .collect();

    let loss_of = |model: &TransformerModel<f64>, g: &mut Graph<f64>| -> (Var, BoundParams) {
        let bound = model.params.bind(g, true);
        let out = model.forward(g, &bound, &batch.batch, &mut DropoutStream::eval()).unwrap();
        let ce = g.cross_entropy(out.logits, &batch.targets, 0.1, Some(PAD)).unwrap();
        let gct = match loss {
            GroupLoss::Continuous { centroid_grad } => {
                let group: Vec<ContinuousSite> = units
                    .iter()
                    .enumerate()
                    .map(|(s, (labels, centroids))| {
                        let e = pool_var(g, out.captures[s].get(FmKind::Value)).unwrap();
                        ContinuousSite {
                            pooled: vec![(1.0, e)],
                            combined: e,
                            labels: labels.clone(),
                            centroids: centroids.clone(),
                        }
                    })
                    .collect();
                gct_loss_continuous(g, &group, GROUPS, 0.5, 0.5, centroid_grad).unwrap()
            }
            GroupLoss::Categorical => {
                let group: Vec<(Var, Vec<usize>)> = units
                    .iter()
                    .enumerate()
                    .map(|(s, (labels, _))| {
                        let p = sites[s].prefix();
                        let e = pool_var(g, out.captures[s].get(FmKind::Value)).unwrap();
                        let w = bound.var(&format!("gct.{p}.w")).unwrap();
                        let b = bound.var(&format!("gct.{p}.b")).unwrap();
                        (classifier_probs(g, e, w, b).unwrap(), labels.clone())
                    })
                    .collect();
                gct_loss_categorical(g, &group, GROUPS, 0.5, 0.5).unwrap()
            }
        };
        (g.add(ce, gct.loss).unwrap(), bound)
    };

    let mut g = Graph::new();
    let (l, bound) = loss_of(&model, &mut g);
    let mut grads = g.backward(l).unwrap();
    let grads = bound.collect_grads(&mut grads);

    let names: Vec<String> = model.params.names().map(String::from).collect();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for name in &names {
        let len = model.params.get(name).unwrap().len();
        let ga = grads.get(name).cloned().unwrap_or_else(|| Tensor::zeros(&[len]));
        let entries: Vec<usize> = match per_tensor {
            Some(n) => (0..n).map(|_| rng.random_range(0..len)).collect(),
            None => (0..len).collect(),
        };
        for j in entries {
            let orig = model.params.get(name).unwrap().data()[j];
            let mut at = |v: f64| {
                model.params.get_mut(name).unwrap().data_mut()[j] = v;
                let mut g = Graph::new();
                let (l, _) = loss_of(&model, &mut g);
                g.value(l).item()
            };
            let (up, down) = (at(orig + H), at(orig - H));
            at(orig);
            analytic.push(ga.data()[j]);
            numeric.push((up - down) / (2.0 * H));
        }
    }
    (rel_err(&analytic, &numeric), analytic.len())
}
