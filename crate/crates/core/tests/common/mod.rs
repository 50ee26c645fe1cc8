#![allow(dead_code)]

use curvlab::model::{build_network, Activation, LayerSpec, Network};
use curvlab::rng;
use curvlab::Tensor;
use rand::Rng;

/// Largest coordinate-wise relative error `|a−b| / max(|a|, |b|, s)` where
/// `s = 1e-3·max(‖b‖∞, floor)`. Coordinates many orders below the largest
/// one are dominated by difference-quotient roundoff, so they are compared
/// on that scale.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = 1e-3 * b.iter().fold(floor, |m, v| m.max(v.abs()));
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(scale))
        .fold(0.0, f64::max)
}

/// `‖a − b‖₂ / ‖b‖₂`.
pub fn norm_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

pub fn mlp(dims: &[usize], act: Activation, seed: u64) -> Network {
    let mut layers = Vec::new();
    for (i, w) in dims.windows(2).enumerate() {
        layers.push(LayerSpec::affine(w[0], w[1]));
        if i + 2 < dims.len() {
            layers.push(LayerSpec::act(act, w[1]));
        }
    }
    build_network(&layers, seed).unwrap()
}

pub fn uniform_point(d: usize, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng::rng(seed);
    Tensor::from_vec((0..d).map(|_| r.random_range(lo..hi)).collect())
}

pub fn gaussian(d: usize, seed: u64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng::rng(seed);
    Tensor::from_vec((0..d).map(|_| StandardNormal.sample(&mut r)).collect())
}

/// Symmetric `d×d` matrix with entries in `[-1, 1]`, row-major.
pub fn random_symmetric(d: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::rng(seed);
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let v: f64 = r.random_range(-1.0..1.0);
            a[i * d + j] = v;
            a[j * d + i] = v;
        }
    }
    a
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Binary affine classifier: class 0 has logit 0, class 1 has `wᵀx + b`.
pub fn affine_binary(w: &[f64], b: f64) -> Network {
    let d = w.len();
    let mut net = build_network(&[LayerSpec::affine(d, 2)], 0).unwrap();
    let names: Vec<String> = net.params().iter().map(|p| p.name.clone()).collect();
    let mut wt = vec![0.0; 2 * d];
    wt[d..].copy_from_slice(w);
    let shape = net.param(&names[0]).unwrap().shape().to_vec();
    *net.param_mut(&names[0]).unwrap() = Tensor::new(shape, wt).unwrap();
    *net.param_mut(&names[1]).unwrap() = Tensor::from_vec(vec![0.0, b]);
    net
}
