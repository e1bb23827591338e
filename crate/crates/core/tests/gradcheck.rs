//! Central finite differences in f64 against the tape's reverse sweep.
//!
//! Every check projects the op's output onto a fixed random tensor so that
//! ops whose plain sum is constant (softmax, normalization) still get a
//! nontrivial gradient.

use std::rc::Rc;

use gha_core::grouping::{
    classifier_probs, combine_vars, gct_loss_categorical, gct_loss_continuous, pool_var, ContinuousSite,
};
use gha_core::numerics::{Graph, Tensor, Var};
use gha_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::{random, rel_err, transformer_gradcheck, GroupLoss, H};

const TOL: f64 = 1e-4;

/// Random entries kept at least `gap` away from zero.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    random(shape, rng).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(g.shape(out), &mut rng));
    let p = g.mul(out, w)?;
    Ok(g.sum_all(p))
}

fn check(name: &str, inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars).unwrap();
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();

    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (i, x) in inputs.iter().enumerate() {
        let ga = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for j in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += H;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * H;
            let down = eval(&xs);
            analytic.push(ga.data()[j]);
            numeric.push((up - down) / (2.0 * H));
        }
    }
    let err = rel_err(&analytic, &numeric);
    assert!(err < TOL, "{name}: relative error {err:e}");
    assert!(analytic.iter().any(|v| v.abs() > 1e-9), "{name}: gradient vanished");
}

#[test]
fn linear_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 5], &mut rng);
    check("matmul", &[a, b], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, 10)
    });

    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 4, 5], &mut rng);
    let bt = random(&[2, 5, 4], &mut rng);
    check("bmm", &[a.clone(), b], |g, v| {
        let y = g.bmm(v[0], v[1], false)?;
        project(g, y, 11)
    });
    check("bmm_trans", &[a, bt], |g, v| {
        let y = g.bmm(v[0], v[1], true)?;
        project(g, y, 12)
    });
}

#[test]
fn elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[3, 4], &mut rng);
    let y = random(&[3, 4], &mut rng);
    let bias = random(&[4], &mut rng);
    check("add", &[x.clone(), y.clone()], |g, v| {
        let z = g.add(v[0], v[1])?;
        project(g, z, 20)
    });
    check("sub", &[x.clone(), y.clone()], |g, v| {
        let z = g.sub(v[0], v[1])?;
        project(g, z, 21)
    });
    check("mul", &[x.clone(), y], |g, v| {
        let z = g.mul(v[0], v[1])?;
        project(g, z, 22)
    });
    check("add_bias", &[x.clone(), bias], |g, v| {
        let z = g.add_bias(v[0], v[1])?;
        project(g, z, 23)
    });
    check("scale", &[x.clone()], |g, v| {
        let z = g.scale(v[0], -1.7);
        project(g, z, 24)
    });
    check("relu", &[away_from_zero(&[3, 4], 0.05, &mut rng)], |g, v| {
        let z = g.relu(v[0]);
        project(g, z, 25)
    });
    let positive = random(&[3, 4], &mut rng).map(|v| v.abs() + 0.1);
    check("clamp_log", &[positive], |g, v| {
        let z = g.clamp_log(v[0], 1e-6);
        project(g, z, 26)
    });
    // A tensor used three times accumulates all three contributions.
    check("reuse", &[x], |g, v| {
        let sq = g.mul(v[0], v[0])?;
        let z = g.add(sq, v[0])?;
        project(g, z, 27)
    });
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3, 4], &mut rng);
    check("reshape", &[x.clone()], |g, v| {
        let z = g.reshape(v[0], &[6, 4])?;
        project(g, z, 30)
    });
    check("permute", &[x.clone()], |g, v| {
        let z = g.permute(v[0], &[2, 0, 1])?;
        project(g, z, 31)
    });
    for axis in 0..3 {
        check("mean_axis", &[x.clone()], |g, v| {
            let z = g.mean_axis(v[0], axis)?;
            project(g, z, 32)
        });
    }
    check("sum_all", &[x], |g, v| {
        let s = g.sum_all(v[0]);
        Ok(g.scale(s, 0.3))
    });
    let table = random(&[6, 4], &mut rng);
    check("embedding", &[table], |g, v| {
        let z = g.embedding(v[0], &[0, 3, 3, 5, 1])?;
        project(g, z, 33)
    });
}

#[test]
fn normalizing_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 3, 5], &mut rng);
    for axis in 0..3 {
        check("softmax", &[x.clone()], |g, v| {
            let z = g.softmax(v[0], axis)?;
            project(g, z, 40)
        });
    }
    // Masked entries get probability zero and no gradient; no row is fully masked.
    let mask: Rc<Vec<bool>> = Rc::new((0..30).map(|i| i % 5 == 4 || i % 7 == 0).collect());
    check("masked_softmax", &[x], move |g, v| {
        let z = g.mask_fill_neg_inf(v[0], mask.clone())?;
        let z = g.softmax(z, 2)?;
        project(g, z, 41)
    });

    let x = random(&[4, 6], &mut rng);
    let gain = random(&[6], &mut rng);
    let bias = random(&[6], &mut rng);
    check("layer_norm", &[x.clone(), gain, bias], |g, v| {
        let z = g.layer_norm(v[0], v[1], v[2], 1)?;
        project(g, z, 42)
    });
    let y = random(&[4, 6], &mut rng);
    check("cosine_rows", &[x.clone(), y], |g, v| {
        let z = g.cosine_rows(v[0], v[1])?;
        project(g, z, 43)
    });
    check("normalize_rows", &[x], |g, v| {
        let z = g.normalize_rows(v[0])?;
        project(g, z, 44)
    });
}

#[test]
fn cross_entropy_with_smoothing_and_ignore() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random(&[5, 7], &mut rng).map(|v| 3.0 * v);
    for smoothing in [0.0, 0.1] {
        check("cross_entropy", &[logits.clone()], |g, v| g.cross_entropy(v[0], &[1, 0, 6, 3, 0], smoothing, Some(0)));
    }
}

fn group_means(rows: &Tensor<f64>, labels: &[usize], groups: usize) -> Vec<Vec<f64>> {
    let d = rows.shape()[1];
    let mut sums = vec![vec![0.0; d]; groups];
    let mut counts = vec![0.0; groups];
    for (r, &l) in labels.iter().enumerate() {
        counts[l] += 1.0;
        for (s, v) in sums[l].iter_mut().zip(rows.row(r)) {
            *s += v;
        }
    }
    sums.iter_mut().zip(&counts).for_each(|(s, n)| s.iter_mut().for_each(|v| *v /= n));
    sums
}

#[test]
fn continuous_group_loss_end_to_end() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Two feature-map kinds `[B, h, T, D]` pooled and mixed before clustering.
    let value = random(&[2, 4, 3, 5], &mut rng);
    let output = random(&[2, 4, 3, 5], &mut rng);
    let labels = vec![0, 1, 0, 1];
    let combined = {
        let mut g = Graph::new();
        let v = g.constant(value.clone());
        let o = g.constant(output.clone());
        let pv = pool_var(&mut g, v).unwrap();
        let po = pool_var(&mut g, o).unwrap();
        let c = combine_vars(&mut g, &[(0.7, pv), (0.3, po)]).unwrap();
        g.value(c).clone()
    };
    let centroids = group_means(&combined, &labels, 2);
    for centroid_grad in [false, true] {
        let (labels, centroids) = (labels.clone(), centroids.clone());
        check("gct_continuous", &[value.clone(), output.clone()], move |g, v| {
            let pv = pool_var(g, v[0])?;
            let po = pool_var(g, v[1])?;
            let pooled = vec![(0.7, pv), (0.3, po)];
            let combined = combine_vars(g, &pooled)?;
            let site = ContinuousSite { pooled, combined, labels: labels.clone(), centroids: centroids.clone() };
            Ok(gct_loss_continuous(g, &[site.clone(), site], 2, 0.5, 0.5, centroid_grad)?.loss)
        });
    }
}

#[test]
fn categorical_group_loss_end_to_end() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let points = random(&[4, 5], &mut rng);
    let w = random(&[5, 3], &mut rng);
    let b = random(&[3], &mut rng);
    check("gct_categorical", &[points, w, b], |g, v| {
        let probs = classifier_probs(g, v[0], v[1], v[2])?;
        Ok(gct_loss_categorical(g, &[(probs, vec![0, 2, 2, 1])], 3, 0.5, 0.5)?.loss)
    });
}

#[test]
fn transformer_task_and_group_losses() {
    for loss in [
        GroupLoss::Continuous { centroid_grad: false },
        GroupLoss::Continuous { centroid_grad: true },
        GroupLoss::Categorical,
    ] {
        let (err, n) = transformer_gradcheck(loss, Some(3), 9);
        assert!(err < TOL, "{loss:?}: relative error {err:e} over {n} entries");
    }
}
