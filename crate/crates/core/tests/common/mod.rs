//! Finite-difference gradient checks shared by the integration and acceptance targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sndcnn::layers::{
    relu_backward, relu_forward, selu_backward, selu_forward, softmax_xent, Activation, BatchNorm, Conv2d, Dense,
    SeluParams,
};
use sndcnn::model::{ModelConfig, Network};
use sndcnn::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-5;
pub const FD_INSTANCES: usize = 30;
/// Minimum distance of any activation input from zero in network checks.
pub const KINK_MARGIN: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Standard normal values kept at least `gap` away from zero.
pub fn normal_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = rng.sample(StandardNormal);
        if v.abs() > gap {
            break v;
        }
    })
}

/// Gradient norms below this are compared in absolute terms: central
/// differences of an O(1) loss carry about `1e-16 / FD_STEP` of rounding
/// noise, so a tensor whose true gradient is ~0 (a kernel feeding batchnorm
/// is scale invariant) has no meaningful relative error.
pub const NORM_FLOOR: f64 = 1e-5;

/// `||a - b|| / max(||a||, ||b||, NORM_FLOOR)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(NORM_FLOOR);
    diff / scale
}

/// Central differences of `f` with respect to each entry of `args[which]`.
pub fn numeric_grad(args: &mut [Vec<f64>], which: usize, f: &dyn Fn(&[Vec<f64>]) -> f64) -> Vec<f64> {
    (0..args[which].len())
        .map(|i| {
            let orig = args[which][i];
            args[which][i] = orig + FD_STEP;
            let up = f(args);
            args[which][i] = orig - FD_STEP;
            let down = f(args);
            args[which][i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Worst relative error over all differentiated arguments.
pub fn worst(args: &mut [Vec<f64>], analytic: &[Vec<f64>], f: &dyn Fn(&[Vec<f64>]) -> f64) -> f64 {
    (0..analytic.len())
        .map(|k| rel_error(&analytic[k], &numeric_grad(args, k, f)))
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn tensor(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

pub fn check_selu(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [4, 6];
    let x = normal_away_from_zero(&mut r, &shape, 1e-3);
    let w = normal(&mut r, &shape);
    let p = SeluParams::STANDARD;
    let g = selu_backward(&x, &w, &p).unwrap();
    let wd = w.data().to_vec();
    let f = move |a: &[Vec<f64>]| dot(selu_forward(&tensor(&shape, &a[0]), &p).data(), &wd);
    worst(&mut [x.into_data()], &[g.into_data()], &f)
}

pub fn check_relu(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [4, 6];
    let x = normal_away_from_zero(&mut r, &shape, 1e-3);
    let w = normal(&mut r, &shape);
    let g = relu_backward(&x, &w).unwrap();
    let wd = w.data().to_vec();
    let f = move |a: &[Vec<f64>]| dot(relu_forward(&tensor(&shape, &a[0])).data(), &wd);
    worst(&mut [x.into_data()], &[g.into_data()], &f)
}

/// Alternates flat `[8, 4]` batches and `[3, 2, 2, 3]` image batches.
pub fn check_batchnorm(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape: Vec<usize> = if seed % 2 == 0 { vec![8, 4] } else { vec![3, 2, 2, 3] };
    let c = shape[1];
    let x = normal(&mut r, &shape);
    let gamma = Tensor::from_fn(&[c], |_| 0.5 + r.random::<f64>());
    let beta = normal(&mut r, &[c]);
    let w = normal(&mut r, &shape);
    let eps = 1e-5;
    let mut bn = BatchNorm::with_params(gamma.clone(), beta.clone(), eps).unwrap();
    bn.forward_train(&x).unwrap();
    let g = bn.backward(&w).unwrap();
    let wd = w.data().to_vec();
    let f = move |a: &[Vec<f64>]| {
        let bn = BatchNorm::with_params(tensor(&[c], &a[1]), tensor(&[c], &a[2]), eps).unwrap();
        dot(bn.forward(&tensor(&shape, &a[0])).unwrap().data(), &wd)
    };
    worst(
        &mut [x.into_data(), gamma.into_data(), beta.into_data()],
        &[g.input.into_data(), g.gamma.into_data(), g.beta.into_data()],
        &f,
    )
}

pub fn check_dense(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, i, o) = (4, 5, 3);
    let x = normal(&mut r, &[b, i]);
    let wt = normal(&mut r, &[i, o]);
    let bias = normal(&mut r, &[o]);
    let w = normal(&mut r, &[b, o]);
    let mut layer = Dense::new(wt.clone(), bias.clone()).unwrap();
    layer.forward_train(&x).unwrap();
    let g = layer.backward(&w).unwrap();
    let wd = w.data().to_vec();
    let f = move |a: &[Vec<f64>]| {
        let layer = Dense::new(tensor(&[i, o], &a[1]), tensor(&[o], &a[2])).unwrap();
        dot(layer.forward(&tensor(&[b, i], &a[0])).unwrap().data(), &wd)
    };
    worst(
        &mut [x.into_data(), wt.into_data(), bias.into_data()],
        &[g.input.into_data(), g.weights.into_data(), g.bias.into_data()],
        &f,
    )
}

/// Cycles stride 1/2 and padding 0/1 over 3×3 and 1×1 kernels.
pub fn check_conv(seed: u64) -> f64 {
    let mut r = rng(seed);
    let stride = 1 + (seed % 2) as usize;
    let padding = ((seed / 2) % 2) as usize;
    let k = if seed % 3 == 2 { 1 } else { 3 };
    let xs = [2, 3, 5, 7];
    let ks = [4, 3, k, k];
    let x = normal(&mut r, &xs);
    let kern = normal(&mut r, &ks);
    let bias = normal(&mut r, &[4]);
    let mut layer = Conv2d::new(kern.clone(), Some(bias.clone()), stride, padding).unwrap();
    let y = layer.forward_train(&x).unwrap();
    let w = normal(&mut r, y.shape());
    let g = layer.backward(&w).unwrap();
    let wd = w.data().to_vec();
    let f = move |a: &[Vec<f64>]| {
        let layer = Conv2d::new(tensor(&ks, &a[1]), Some(tensor(&[4], &a[2])), stride, padding).unwrap();
        dot(layer.forward(&tensor(&xs, &a[0])).unwrap().data(), &wd)
    };
    worst(
        &mut [x.into_data(), kern.into_data(), bias.into_data()],
        &[g.input.into_data(), g.kernels.into_data(), g.bias.unwrap().into_data()],
        &f,
    )
}

pub fn check_softmax_xent(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, n) = (4, 5);
    let z = Tensor::from_fn(&[b, n], |_| 3.0 * r.sample::<f64, _>(StandardNormal));
    let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..n)).collect();
    let (_, g) = softmax_xent(&z, &labels).unwrap();
    let f = move |a: &[Vec<f64>]| softmax_xent(&tensor(&[b, n], &a[0]), &labels).unwrap().0;
    worst(&mut [z.into_data()], &[g.into_data()], &f)
}

/// Three bottleneck blocks; toggles cycle over the ablation corners.
pub fn network_config(seed: u64) -> ModelConfig {
    let (act, sc, bn) = match seed % 5 {
        0 => (Activation::Relu, true, true),
        1 => (Activation::Selu, false, false),
        2 => (Activation::Relu, true, false),
        3 => (Activation::Relu, false, true),
        _ => (Activation::Selu, true, true),
    };
    ModelConfig::cnn(11, act, sc, bn, 5)
        .with_widths(vec![8, 8, 8])
        .with_stage_blocks(vec![1, 1, 1])
        .with_input(5 * 4, Some([5, 4]))
}

/// Gradient of the mean cross-entropy with respect to every parameter.
pub fn check_network(seed: u64) -> f64 {
    let cfg = network_config(seed);
    let mut r = rng(seed);
    let batch = 3;
    let mut net = Network::<f64>::build(&cfg, seed).unwrap();
    // non-trivial batchnorm parameters, so their gradients are not at a symmetric point
    for p in net.params_mut() {
        if p.rank() == 1 {
            p.data_mut().iter_mut().for_each(|v| *v += 0.3 * r.sample::<f64, _>(StandardNormal));
        }
    }
    // redraw inputs until no activation input sits near the kink at zero,
    // where a finite step would straddle two linear pieces
    let x = loop {
        let x = net.shape_input(normal(&mut r, &[batch, cfg.input_dim])).unwrap();
        let mut nearest = f64::INFINITY;
        let mut tap = |_: usize, pre: &Tensor<f64>, _: &Tensor<f64>| {
            nearest = pre.data().iter().fold(nearest, |m, v| m.min(v.abs()));
        };
        net.forward_train_tapped(&x, &mut tap).unwrap();
        if nearest > KINK_MARGIN {
            break x;
        }
    };
    let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..cfg.output_dim)).collect();
    let logits = net.forward_train(&x).unwrap();
    let (_, g) = softmax_xent(&logits, &labels).unwrap();
    let grads = net.backward(&g).unwrap();
    let shapes: Vec<Vec<usize>> = net.params().iter().map(|p| p.shape().to_vec()).collect();
    let mut args: Vec<Vec<f64>> = net.params().iter().map(|p| p.data().to_vec()).collect();
    let analytic: Vec<Vec<f64>> = grads.tensors.into_iter().map(Tensor::into_data).collect();
    let base = net.clone();
    let f = move |a: &[Vec<f64>]| {
        let mut n = base.clone();
        let values = a.iter().zip(&shapes).map(|(d, s)| tensor(s, d)).collect();
        n.set_params(values).unwrap();
        softmax_xent(&n.forward(&x).unwrap(), &labels).unwrap().0
    };
    worst(&mut args, &analytic, &f)
}

/// Name and checker of every gradient family.
pub const GRADIENT_FAMILIES: [(&str, fn(u64) -> f64); 7] = [
    ("selu", check_selu),
    ("relu", check_relu),
    ("batchnorm", check_batchnorm),
    ("dense", check_dense),
    ("conv", check_conv),
    ("softmax-xent", check_softmax_xent),
    ("3-block network", check_network),
];
