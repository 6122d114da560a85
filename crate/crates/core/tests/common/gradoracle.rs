//! Shared central finite-difference oracle used by the gradient-check
//! and acceptance suites.
//!
//! Each op suite builds >= 50 random small instances, computes the
//! analytic gradient of a weighted scalar readout and compares every
//! trainable scalar against (f(x+h) - f(x-h)) / 2h, tolerance 1e-3
//! relative to max(1, |analytic|, |numeric|). Returns the instance count.

use layerwise::autodiff::{ParamId, ParamStore, Tape, Tensor};
use layerwise::nn::{BatchNormState, Mode, PoolSpec};
use layerwise::rng::{stream, StreamTag};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: usize = 50;
const EPS: f32 = 1e-2;
const TOL: f32 = 1e-3;

fn rng_for(case: &str, i: usize) -> ChaCha8Rng {
    let salt = case
        .bytes()
        .fold(0u64, |a, b| a.wrapping_mul(131).wrapping_add(b as u64));
    stream(salt, StreamTag::Init, i as u64)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Weighted scalar readout so every output element influences the loss
/// with a distinct coefficient.
fn readout(tape: &mut Tape, out: Tensor, weights: &[f32]) -> Tensor {
    let w = tape.leaf(weights.to_vec(), tape.shape(out).to_vec(), false);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn check(
    case: &str,
    instance: usize,
    store: &mut ParamStore,
    params: &[ParamId],
    forward: &mut dyn FnMut(&ParamStore, &mut Tape) -> Tensor,
) {
    let mut tape = Tape::new();
    let loss = forward(store, &mut tape);
    assert_eq!(tape.shape(loss), &[1], "{case}: loss must be scalar");
    tape.backward(loss).unwrap();
    tape.accumulate_param_grads(store);
    let analytic: Vec<Vec<f32>> = params.iter().map(|&p| store.get(p).grad.clone()).collect();
    store.zero_grads();

    for (pi, &p) in params.iter().enumerate() {
        for k in 0..store.get(p).values.len() {
            let orig = store.get(p).values[k];
            store.get_mut(p).values[k] = orig + EPS;
            let mut t1 = Tape::new();
            let l1 = forward(store, &mut t1);
            let f1 = t1.values(l1)[0];
            store.get_mut(p).values[k] = orig - EPS;
            let mut t2 = Tape::new();
            let l2 = forward(store, &mut t2);
            let f2 = t2.values(l2)[0];
            store.get_mut(p).values[k] = orig;
            let numeric = (f1 - f2) / (2.0 * EPS);
            let a = analytic[pi][k];
            let tol = TOL * 1.0f32.max(a.abs()).max(numeric.abs());
            assert!(
                (a - numeric).abs() <= tol,
                "{case} instance {instance}, param {pi}[{k}]: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

pub fn conv2d_suite() -> usize {
    for i in 0..INSTANCES {
        let mut rng = rng_for("conv", i);
        let (n, cin, cout) = (
            rng.random_range(1..3usize),
            rng.random_range(1..3usize),
            rng.random_range(1..3usize),
        );
        let hw = rng.random_range(3..6usize);
        let stride = rng.random_range(1..3usize);
        let mut store = ParamStore::new();
        let x = store.add(vec![n, cin, hw, hw], rand_vec(&mut rng, n * cin * hw * hw, -1.0, 1.0));
        let w = store.add(
            vec![cout, cin, 3, 3],
            rand_vec(&mut rng, cout * cin * 9, -0.5, 0.5),
        );
        let b = store.add(vec![cout], rand_vec(&mut rng, cout, -0.5, 0.5));
        let out_hw = (hw + 2 - 3) / stride + 1;
        let weights = rand_vec(&mut rng, n * cout * out_hw * out_hw, -1.0, 1.0);
        check("conv", i, &mut store, &[x, w, b], &mut |s, tape| {
            let xt = tape.param(s, x, true);
            let wt = tape.param(s, w, true);
            let bt = tape.param(s, b, true);
            let out = tape.conv2d(xt, wt, bt, stride, 1).unwrap();
            readout(tape, out, &weights)
        });
    }
    INSTANCES
}

pub fn linear_suite() -> usize {
    for i in 0..INSTANCES {
        let mut rng = rng_for("linear", i);
        let (n, f, g) = (
            rng.random_range(1..5usize),
            rng.random_range(1..6usize),
            rng.random_range(1..6usize),
        );
        let mut store = ParamStore::new();
        let x = store.add(vec![n, f], rand_vec(&mut rng, n * f, -1.0, 1.0));
        let w = store.add(vec![g, f], rand_vec(&mut rng, g * f, -1.0, 1.0));
        let b = store.add(vec![g], rand_vec(&mut rng, g, -1.0, 1.0));
        let weights = rand_vec(&mut rng, n * g, -1.0, 1.0);
        check("linear", i, &mut store, &[x, w, b], &mut |s, tape| {
            let xt = tape.param(s, x, true);
            let wt = tape.param(s, w, true);
            let bt = tape.param(s, b, true);
            let out = tape.linear(xt, wt, bt).unwrap();
            readout(tape, out, &weights)
        });
    }
    INSTANCES
}

pub fn batch_norm_suite() -> usize {
    for i in 0..INSTANCES {
        let mut rng = rng_for("bn", i);
        // Keep batch*spatial >= 12: near-singular batch variance makes the
        // loss so nonlinear that central differences stop being an oracle.
        let (n, c, hw) = (
            rng.random_range(3..6usize),
            rng.random_range(1..4usize),
            rng.random_range(2..4usize),
        );
        let mut store = ParamStore::new();
        let x = store.add(vec![n, c, hw, hw], rand_vec(&mut rng, n * c * hw * hw, -2.0, 2.0));
        let gamma = store.add(vec![c], rand_vec(&mut rng, c, 0.5, 1.5));
        let beta = store.add(vec![c], rand_vec(&mut rng, c, -0.5, 0.5));
        let weights = rand_vec(&mut rng, n * c * hw * hw, -1.0, 1.0);
        check("bn", i, &mut store, &[x, gamma, beta], &mut |s, tape| {
            let xt = tape.param(s, x, true);
            let g = tape.param(s, gamma, true);
            let bt = tape.param(s, beta, true);
            // Fresh normalization state per evaluation: train mode reads
            // only batch statistics, so the side-effected running stats
            // never feed back into the value.
            let mut bn = BatchNormState::new(c);
            let out = tape.batch_norm(xt, g, bt, &mut bn, Mode::Train).unwrap();
            readout(tape, out, &weights)
        });
    }
    INSTANCES
}

pub fn leaky_relu_suite() -> usize {
    for i in 0..INSTANCES {
        let mut rng = rng_for("lrelu", i);
        let n = rng.random_range(2..20usize);
        // Keep every input at least 5 eps away from zero.
        let vals: Vec<f32> = (0..n)
            .map(|_| {
                let v: f32 = rng.random_range(0.06..2.0);
                if rng.random_range(0..2) == 0 {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let mut store = ParamStore::new();
        let x = store.add(vec![n], vals);
        let weights = rand_vec(&mut rng, n, -1.0, 1.0);
        check("lrelu", i, &mut store, &[x], &mut |s, tape| {
            let xt = tape.param(s, x, true);
            let out = tape.leaky_relu(xt, 0.01);
            readout(tape, out, &weights)
        });
    }
    INSTANCES
}

pub fn max_pool_suite() -> usize {
    for i in 0..INSTANCES {
        let mut rng = rng_for("maxpool", i);
        let (n, c) = (rng.random_range(1..3usize), rng.random_range(1..3usize));
        let hw = rng.random_range(2..5usize) * 2;
        let count = n * c * hw * hw;
        // All values spaced at least 0.03 apart, so the argmax is stable
        // under the finite-difference perturbation.
        let mut perm: Vec<usize> = (0..count).collect();
        for k in (1..count).rev() {
            let j = rng.random_range(0..=k);
            perm.swap(k, j);
        }
        let vals: Vec<f32> = perm.iter().map(|&p| p as f32 * 0.03 - 1.0).collect();
        let mut store = ParamStore::new();
        let x = store.add(vec![n, c, hw, hw], vals);
        let out_hw = hw / 2;
        let weights = rand_vec(&mut rng, n * c * out_hw * out_hw, -1.0, 1.0);
        check("maxpool", i, &mut store, &[x], &mut |s, tape| {
            let xt = tape.param(s, x, true);
            let out = tape.pool2d(xt, PoolSpec::max(2, 2)).unwrap();
            readout(tape, out, &weights)
        });
    }
    INSTANCES
}

pub fn avg_pool_suite() -> usize {
    for i in 0..INSTANCES {
        let mut rng = rng_for("avgpool", i);
        let (n, c) = (rng.random_range(1..3usize), rng.random_range(1..3usize));
        let hw = rng.random_range(2..5usize) * 2;
        let mut store = ParamStore::new();
        let x = store.add(vec![n, c, hw, hw], rand_vec(&mut rng, n * c * hw * hw, -1.0, 1.0));
        let out_hw = hw / 2;
        let weights = rand_vec(&mut rng, n * c * out_hw * out_hw, -1.0, 1.0);
        check("avgpool", i, &mut store, &[x], &mut |s, tape| {
            let xt = tape.param(s, x, true);
            let out = tape.pool2d(xt, PoolSpec::average(2, 2)).unwrap();
            readout(tape, out, &weights)
        });
    }
    INSTANCES
}

pub fn adaptive_avg_pool_suite() -> usize {
    for i in 0..INSTANCES {
        let mut rng = rng_for("adaptive", i);
        let (n, c) = (rng.random_range(1..3usize), rng.random_range(1..3usize));
        let hw = rng.random_range(3..7usize);
        let target = rng.random_range(1..=hw);
        let mut store = ParamStore::new();
        let x = store.add(vec![n, c, hw, hw], rand_vec(&mut rng, n * c * hw * hw, -1.0, 1.0));
        let weights = rand_vec(&mut rng, n * c * target * target, -1.0, 1.0);
        check("adaptive", i, &mut store, &[x], &mut |s, tape| {
            let xt = tape.param(s, x, true);
            let out = tape.adaptive_avg_pool2d(xt, target, target).unwrap();
            readout(tape, out, &weights)
        });
    }
    INSTANCES
}

pub fn cross_entropy_suite() -> usize {
    for i in 0..INSTANCES {
        let mut rng = rng_for("xent", i);
        let (n, k) = (rng.random_range(2..6usize), rng.random_range(2..6usize));
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..k as u32)).collect();
        let mut store = ParamStore::new();
        let x = store.add(vec![n, k], rand_vec(&mut rng, n * k, -2.0, 2.0));
        check("xent", i, &mut store, &[x], &mut |s, tape| {
            let xt = tape.param(s, x, true);
            tape.softmax_cross_entropy(xt, &labels).unwrap()
        });
    }
    INSTANCES
}

pub fn frobenius_suite() -> usize {
    for i in 0..INSTANCES {
        let mut rng = rng_for("frob", i);
        let (n, k) = (rng.random_range(2..6usize), rng.random_range(2..6usize));
        let mut target = vec![0.0f32; n * k];
        for r in 0..n {
            let l = rng.random_range(0..k);
            target[r * k + l] = 1.0;
        }
        let mut store = ParamStore::new();
        let x = store.add(vec![n, k], rand_vec(&mut rng, n * k, -2.0, 2.0));
        check("frob", i, &mut store, &[x], &mut |s, tape| {
            let xt = tape.param(s, x, true);
            tape.frobenius_onehot(xt, &target).unwrap()
        });
    }
    INSTANCES
}

/// Run every op suite; returns (op name, instances) pairs.
#[allow(dead_code)]
pub fn run_all() -> Vec<(&'static str, usize)> {
    vec![
        ("conv2d", conv2d_suite()),
        ("linear", linear_suite()),
        ("batch_norm", batch_norm_suite()),
        ("leaky_relu", leaky_relu_suite()),
        ("max_pool", max_pool_suite()),
        ("avg_pool", avg_pool_suite()),
        ("adaptive_avg_pool", adaptive_avg_pool_suite()),
        ("cross_entropy", cross_entropy_suite()),
        ("frobenius_onehot", frobenius_suite()),
    ]
}
