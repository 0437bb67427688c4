use super::*;
use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Checks every input coordinate of `build` (a scalar function of `inputs`)
/// against central differences.
fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.len() {
            let eval = |delta: f64| {
                let mut perturbed = inputs.clone();
                perturbed[k].data_mut()[i] += delta;
                let mut g = Graph::new();
                let vs: Vec<Var> = perturbed.into_iter().map(|t| g.constant(t)).collect();
                let o = build(&mut g, &vs);
                g.value(o).item()
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            let a = analytic.data()[i];
            let err = (a - numeric).abs();
            assert!(
                err <= 1e-6 * a.abs().max(numeric.abs()).max(1.0),
                "input {k} coord {i}: analytic {a} numeric {numeric}"
            );
        }
    }
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    let w = random(&[1, 4], &mut rng);
    check(vec![a.clone(), b.clone(), w.clone()], |g, v| {
        let s = g.add(v[0], v[1]).unwrap();
        let d = g.sub(s, v[1]).unwrap();
        let d = g.scale(d, 1.7);
        let t = g.tanh(d);
        let sg = g.sigmoid(v[1]);
        let l = g.leaky_relu(t, 0.2);
        let r = g.relu(sg);
        let sum = g.weighted_sum(&[(l, 0.5), (r, -2.0)]).unwrap();
        let y = g.linear(sum, v[2], None).unwrap();
        g.mean_all(y).unwrap()
    });
}

#[test]
fn log_clamps_match_finite_differences_inside_the_domain() {
    let p = Tensor::new(&[2, 3], vec![0.2, 0.5, 0.9, 0.33, 0.71, 0.15]).unwrap();
    check(vec![p], |g, v| {
        let a = g.log_clamped(v[0], 1e-7);
        let b = g.log1m_clamped(v[0], 1e-7);
        let s = g.weighted_sum(&[(a, 1.0), (b, 0.3)]).unwrap();
        g.mean_all(s).unwrap()
    });
}

#[test]
fn log_clamp_has_zero_gradient_below_eps() {
    let mut g = Graph::new();
    let p = g.variable(Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
    let a = g.log_clamped(p, 1e-7);
    let b = g.log1m_clamped(p, 1e-7);
    let s = g.add(a, b).unwrap();
    let m = g.mean_all(s).unwrap();
    assert!((g.value(m).item() - (1e-7f64).ln()).abs() < 1e-12);
    let grads = g.backward(m).unwrap();
    let d = grads.get(p).unwrap().data();
    // p=0: log term clamped, 1-p term live; p=1: the reverse
    assert!((d[0] - (-0.5)).abs() < 1e-12);
    assert!((d[1] - 0.5).abs() < 1e-12);
}

#[test]
fn conv_and_pooling_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[2, 2, 5, 4], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let w1 = random(&[2, 3, 1, 1], &mut rng);
    let head = random(&[1, 4], &mut rng);
    check(vec![x, w, b, w1, head], |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
        let y = g.upsample2x(y).unwrap();
        let y = g.conv2d(y, v[3], None, 1, 0).unwrap();
        let rep = g.repeat_channels(y, 2).unwrap();
        let p = g.global_avg_pool(rep).unwrap();
        let o = g.linear(p, v[4], None).unwrap();
        g.mean_all(o).unwrap()
    });
}

#[test]
fn batch_norm_matches_finite_differences_in_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[3, 2, 2, 2], &mut rng);
    let gamma = Tensor::new(&[2], vec![1.3, 0.7]).unwrap();
    let beta = Tensor::new(&[2], vec![0.1, -0.2]).unwrap();
    let head = random(&[1, 2], &mut rng);
    for running in [false, true] {
        check(vec![x.clone(), gamma.clone(), beta.clone(), head.clone()], move |g, v| {
            let mean = [0.1, -0.3];
            let var = [0.8, 1.4];
            let stats = if running {
                NormStats::Running {
                    mean: &mean,
                    var: &var,
                }
            } else {
                NormStats::Batch
            };
            let (y, _) = g.batch_norm(v[0], v[1], v[2], stats, 1e-5).unwrap();
            // a nonlinearity so the batch-mode gradient is not trivially zero
            let y = g.tanh(y);
            let p = g.global_avg_pool(y).unwrap();
            let o = g.linear(p, v[3], None).unwrap();
            let o = g.tanh(o);
            g.mean_all(o).unwrap()
        });
    }
}

#[test]
fn batch_norm_reports_unbiased_batch_variance() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let gamma = g.constant(Tensor::full(&[1], 1.0));
    let beta = g.constant(Tensor::zeros(&[1]));
    let (_, stats) = g.batch_norm(x, gamma, beta, NormStats::Batch, 1e-5).unwrap();
    let stats = stats.unwrap();
    assert!((stats.mean[0] - 2.5).abs() < 1e-12);
    assert!((stats.var[0] - 5.0 / 3.0).abs() < 1e-12);
}

#[test]
fn structural_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&[2, 1, 2, 3], &mut rng);
    let b = random(&[2, 2, 2, 3], &mut rng);
    let head = random(&[1, 3], &mut rng);
    check(vec![a, b, head], |g, v| {
        let c = g.concat_channels(&[v[0], v[1]]).unwrap();
        let d = g.concat_batch(&[c, c]).unwrap();
        let s = g.slice_batch(d, 1, 2).unwrap();
        let s = g.tanh(s);
        let p = g.global_avg_pool(s).unwrap();
        let o = g.linear(p, v[2], None).unwrap();
        g.mean_all(o).unwrap()
    });
}

#[test]
fn loss_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random(&[4, 3], &mut rng);
    let targets = Tensor::new(
        &[4, 3],
        vec![0.8, 0.1, 0.1, 0.1, 0.8, 0.1, 0.1, 0.1, 0.8, 0.8, 0.1, 0.1],
    )
    .unwrap();
    check(vec![logits], |g, v| g.soft_cross_entropy(v[0], &targets).unwrap());

    let emb = random(&[6, 3], &mut rng);
    let labels = [0, 0, 1, 1, 2, 2];
    check(vec![emb], |g, v| g.batch_hard_triplet(v[0], &labels, 1.5).unwrap());

    let a = random(&[2, 3], &mut rng);
    let b = random(&[2, 3], &mut rng);
    check(vec![a.clone(), b.clone()], |g, v| g.mse(v[0], v[1]).unwrap());
    check(vec![a, b], |g, v| g.l1(v[0], v[1]).unwrap());
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[2], 3.0));
    let v = g.variable(Tensor::full(&[2], 1.0));
    let s = g.add(c, v).unwrap();
    let m = g.mean_all(s).unwrap();
    let grads = g.backward(m).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(v).unwrap().data(), &[0.5, 0.5]);
}

#[test]
fn backward_requires_a_scalar() {
    let mut g = Graph::new();
    let v = g.variable(Tensor::full(&[2], 1.0));
    assert!(g.backward(v).is_err());
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[3, 3, 3, 3]));
    assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::Shape { .. })));
}
