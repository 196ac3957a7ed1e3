//! Finite-difference checks for every differentiable operation.
//!
//! The oracle is a central difference with the implementation treated as a
//! black-box scalar function; relative error uses `|a - fd| / (|a| + 1e-8)`.

use cityflow_core::autodiff::Graph;
use cityflow_core::rng::SplitMix64;
use cityflow_core::tensor::Tensor;
use cityflow_testkit::grad::{central_diff, max_rel_error};

const TOL: f64 = 1e-4;

fn rng_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

#[test]
fn conv2d_same_gradients() {
    let input = rng_tensor(&[2, 4, 4], 8, -1.0, 1.0);
    let weight = rng_tensor(&[2, 2, 3, 3], 9, -1.0, 1.0);
    let bias = rng_tensor(&[2], 10, -1.0, 1.0);
    let target = rng_tensor(&[2, 4, 4], 11, -1.0, 1.0);

    let run = |i: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
        let mut g = Graph::new();
        let xi = g.constant(i.clone());
        let wi = g.constant(w.clone());
        let bi = g.constant(b.clone());
        let t = g.constant(target.clone());
        let y = g.conv2d_same(xi, wi, bi).unwrap();
        let loss = g.mse_loss(y, t).unwrap();
        g.value(loss).item().unwrap()
    };

    let mut g = Graph::new();
    let xi = g.parameter(input.clone());
    let wi = g.parameter(weight.clone());
    let bi = g.parameter(bias.clone());
    let t = g.constant(target.clone());
    let y = g.conv2d_same(xi, wi, bi).unwrap();
    let loss = g.mse_loss(y, t).unwrap();
    let grads = g.backward(loss).unwrap();

    let fd_w = central_diff(&weight, 1e-5, |w| run(&input, w, &bias));
    assert!(max_rel_error(grads.get(wi, &g).data(), fd_w.data()) < TOL);
    let fd_x = central_diff(&input, 1e-5, |i| run(i, &weight, &bias));
    assert!(max_rel_error(grads.get(xi, &g).data(), fd_x.data()) < TOL);
    let fd_b = central_diff(&bias, 1e-5, |b| run(&input, &weight, b));
    assert!(max_rel_error(grads.get(bi, &g).data(), fd_b.data()) < TOL);
}

#[test]
fn batched_conv2d_same_gradients() {
    let input = rng_tensor(&[3, 2, 3, 3], 40, -1.0, 1.0);
    let weight = rng_tensor(&[2, 2, 3, 3], 41, -1.0, 1.0);
    let bias = rng_tensor(&[2], 42, -1.0, 1.0);
    let target = rng_tensor(&[3, 2, 3, 3], 43, -1.0, 1.0);
    let run = |w: &Tensor| -> f64 {
        let mut g = Graph::new();
        let xi = g.constant(input.clone());
        let wi = g.constant(w.clone());
        let bi = g.constant(bias.clone());
        let t = g.constant(target.clone());
        let y = g.conv2d_same(xi, wi, bi).unwrap();
        let loss = g.mse_loss(y, t).unwrap();
        g.value(loss).item().unwrap()
    };
    let mut g = Graph::new();
    let xi = g.constant(input.clone());
    let wi = g.parameter(weight.clone());
    let bi = g.constant(bias.clone());
    let t = g.constant(target.clone());
    let y = g.conv2d_same(xi, wi, bi).unwrap();
    let loss = g.mse_loss(y, t).unwrap();
    let grads = g.backward(loss).unwrap();
    let fd = central_diff(&weight, 1e-5, run);
    assert!(max_rel_error(grads.get(wi, &g).data(), fd.data()) < TOL);
}

#[test]
fn relu_gradient_away_from_kink() {
    let x0 = Tensor::new(vec![6], vec![0.8, -0.5, 1.2, -1.4, -0.9, 0.3]).unwrap();
    let run = |x: &Tensor| -> f64 {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let y = g.relu(xi);
        let s = g.sum(y);
        g.value(s).item().unwrap()
    };
    let mut g = Graph::new();
    let xi = g.parameter(x0.clone());
    let y = g.relu(xi);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    let fd = central_diff(&x0, 1e-6, run);
    assert!(max_rel_error(grads.get(xi, &g).data(), fd.data()) < TOL);
}

#[test]
fn tanh_gradient() {
    let x0 = rng_tensor(&[8], 12, -2.0, 2.0);
    let run = |x: &Tensor| -> f64 {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let y = g.tanh(xi);
        let s = g.sum(y);
        g.value(s).item().unwrap()
    };
    let mut g = Graph::new();
    let xi = g.parameter(x0.clone());
    let y = g.tanh(xi);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    let fd = central_diff(&x0, 1e-6, run);
    assert!(max_rel_error(grads.get(xi, &g).data(), fd.data()) < TOL);
}

#[test]
fn fully_connected_gradients() {
    let x0 = rng_tensor(&[5], 13, -1.0, 1.0);
    let w0 = rng_tensor(&[3, 5], 14, -1.0, 1.0);
    let b0 = rng_tensor(&[3], 15, -1.0, 1.0);
    let target = rng_tensor(&[3], 16, -1.0, 1.0);
    let run = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let wi = g.constant(w.clone());
        let bi = g.constant(b.clone());
        let t = g.constant(target.clone());
        let y = g.fully_connected(xi, wi, bi).unwrap();
        let loss = g.mse_loss(y, t).unwrap();
        g.value(loss).item().unwrap()
    };
    let mut g = Graph::new();
    let xi = g.parameter(x0.clone());
    let wi = g.parameter(w0.clone());
    let bi = g.parameter(b0.clone());
    let t = g.constant(target.clone());
    let y = g.fully_connected(xi, wi, bi).unwrap();
    let loss = g.mse_loss(y, t).unwrap();
    let grads = g.backward(loss).unwrap();
    let fd_x = central_diff(&x0, 1e-5, |x| run(x, &w0, &b0));
    assert!(max_rel_error(grads.get(xi, &g).data(), fd_x.data()) < TOL);
    let fd_w = central_diff(&w0, 1e-5, |w| run(&x0, w, &b0));
    assert!(max_rel_error(grads.get(wi, &g).data(), fd_w.data()) < TOL);
    let fd_b = central_diff(&b0, 1e-5, |b| run(&x0, &w0, b));
    assert!(max_rel_error(grads.get(bi, &g).data(), fd_b.data()) < TOL);
}

#[test]
fn batch_norm_train_gradients() {
    let x0 = rng_tensor(&[3, 2, 2, 2], 25, -2.0, 2.0);
    let gamma0 = rng_tensor(&[2], 26, 0.5, 1.5);
    let beta0 = rng_tensor(&[2], 27, -0.5, 0.5);
    let target = rng_tensor(&[3, 2, 2, 2], 28, -1.0, 1.0);
    let run = |x: &Tensor, ga: &Tensor, be: &Tensor| -> f64 {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let gi = g.constant(ga.clone());
        let bi = g.constant(be.clone());
        let t = g.constant(target.clone());
        let (y, _) = g.batch_norm_train(xi, gi, bi, 1e-5).unwrap();
        let loss = g.mse_loss(y, t).unwrap();
        g.value(loss).item().unwrap()
    };
    let mut g = Graph::new();
    let xi = g.parameter(x0.clone());
    let gi = g.parameter(gamma0.clone());
    let bi = g.parameter(beta0.clone());
    let t = g.constant(target.clone());
    let (y, _) = g.batch_norm_train(xi, gi, bi, 1e-5).unwrap();
    let loss = g.mse_loss(y, t).unwrap();
    let grads = g.backward(loss).unwrap();
    let fd_x = central_diff(&x0, 1e-5, |x| run(x, &gamma0, &beta0));
    assert!(max_rel_error(grads.get(xi, &g).data(), fd_x.data()) < TOL);
    let fd_g = central_diff(&gamma0, 1e-5, |ga| run(&x0, ga, &beta0));
    assert!(max_rel_error(grads.get(gi, &g).data(), fd_g.data()) < TOL);
    let fd_b = central_diff(&beta0, 1e-5, |be| run(&x0, &gamma0, be));
    assert!(max_rel_error(grads.get(bi, &g).data(), fd_b.data()) < TOL);
}

#[test]
fn batch_norm_infer_gradients() {
    let x0 = rng_tensor(&[2, 3, 3], 29, -2.0, 2.0);
    let gamma0 = rng_tensor(&[2], 30, 0.5, 1.5);
    let beta0 = rng_tensor(&[2], 31, -0.5, 0.5);
    let rm = rng_tensor(&[2], 32, -0.5, 0.5);
    let rv = rng_tensor(&[2], 33, 0.5, 2.0);
    let run = |x: &Tensor| -> f64 {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let gi = g.constant(gamma0.clone());
        let bi = g.constant(beta0.clone());
        let y = g.batch_norm_infer(xi, gi, bi, &rm, &rv, 1e-5).unwrap();
        let s = g.sum(y);
        g.value(s).item().unwrap()
    };
    let mut g = Graph::new();
    let xi = g.parameter(x0.clone());
    let gi = g.constant(gamma0.clone());
    let bi = g.constant(beta0.clone());
    let y = g.batch_norm_infer(xi, gi, bi, &rm, &rv, 1e-5).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    let fd = central_diff(&x0, 1e-5, run);
    assert!(max_rel_error(grads.get(xi, &g).data(), fd.data()) < TOL);
}

#[test]
fn broadcast_hadamard_gradient_sums_over_batch() {
    let big = rng_tensor(&[3, 2, 2], 17, -1.0, 1.0);
    let small = rng_tensor(&[2, 2], 18, -1.0, 1.0);
    let run = |s: &Tensor| -> f64 {
        let mut g = Graph::new();
        let b = g.constant(big.clone());
        let sm = g.constant(s.clone());
        let h = g.hadamard(b, sm).unwrap();
        let out = g.sum(h);
        g.value(out).item().unwrap()
    };
    let mut g = Graph::new();
    let b = g.constant(big.clone());
    let sm = g.parameter(small.clone());
    let h = g.hadamard(b, sm).unwrap();
    let out = g.sum(h);
    let grads = g.backward(out).unwrap();
    let fd = central_diff(&small, 1e-6, run);
    assert!(max_rel_error(grads.get(sm, &g).data(), fd.data()) < TOL);
}
