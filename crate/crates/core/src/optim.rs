//! Adaptive-moment optimizer with bias correction.

use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment accumulators for one flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// Folds `g` into the moments and returns `m̂ / (√v̂ + ε)`.
    pub fn direction(&mut self, g: &[f64]) -> Vec<f64> {
        assert_eq!(g.len(), self.m.len(), "gradient length changed");
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        self.m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(g)
            .map(|((m, v), &gi)| {
                *m = BETA1 * *m + (1.0 - BETA1) * gi;
                *v = BETA2 * *v + (1.0 - BETA2) * gi * gi;
                (*m / c1) / ((*v / c2).sqrt() + EPSILON)
            })
            .collect()
    }
}

/// One accumulator per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self {
            states: params.into_iter().map(|p| AdamState::new(p.len())).collect(),
        }
    }

    /// `θ ← θ − lr · m̂/(√v̂ + ε)` for every tensor.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Tensor], lr: f64) {
        for ((p, g), s) in params.into_iter().zip(grads).zip(&mut self.states) {
            let dir = s.direction(g.data());
            for (w, d) in p.data_mut().iter_mut().zip(dir) {
                *w -= lr * d;
            }
        }
    }
}

/// Geometric interpolation from `start` (epoch 0) to `end` (last epoch).
pub fn geometric_lr(start: f64, end: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return start;
    }
    start * (end / start).powf(epoch as f64 / (epochs - 1) as f64)
}
