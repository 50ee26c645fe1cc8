//! Loss and model interfaces shared by the probes and attacks.

use crate::error::{Error, Result};
use crate::model::Network;
use crate::tape::{Bindings, Graph};
use crate::tensor::Tensor;

/// Scalar function of the input with a first-order oracle.
pub trait InputLoss: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &Tensor) -> Result<f64>;
    fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)>;

    fn grad(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.value_and_grad(x)?.1)
    }
}

/// Forward-only classifier access. Gradient-free attacks take this trait
/// and nothing else.
pub trait LogitModel: Sync {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn logits(&self, x: &Tensor) -> Result<Tensor>;

    fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(self.logits(x)?.argmax())
    }
}

/// Classifier with input gradients of its loss and of logit combinations.
pub trait DifferentiableModel: LogitModel {
    fn loss_grad(&self, x: &Tensor, y: usize) -> Result<(f64, Tensor)>;
    /// Value and input-gradient of `coeffᵀ f(x)`.
    fn logit_combination_grad(&self, x: &Tensor, coeff: &Tensor) -> Result<(f64, Tensor)>;
}

impl LogitModel for Network {
    fn input_dim(&self) -> usize {
        Network::input_dim(self)
    }
    fn num_classes(&self) -> usize {
        Network::num_classes(self)
    }
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Network::logits(self, x)
    }
}

impl DifferentiableModel for Network {
    fn loss_grad(&self, x: &Tensor, y: usize) -> Result<(f64, Tensor)> {
        self.loss_input_grad(x, y)
    }
    fn logit_combination_grad(&self, x: &Tensor, coeff: &Tensor) -> Result<(f64, Tensor)> {
        Network::logit_combination_grad(self, x, coeff)
    }
}

/// `x ↦ ℓ(x) = XEnt(f(x), y)` for a fixed label.
pub struct LabeledLoss<'a, M: ?Sized> {
    pub model: &'a M,
    pub label: usize,
}

impl<'a, M: DifferentiableModel + ?Sized> LabeledLoss<'a, M> {
    pub fn new(model: &'a M, label: usize) -> Self {
        Self { model, label }
    }
}

impl<M: DifferentiableModel + ?Sized> InputLoss for LabeledLoss<'_, M> {
    fn dim(&self) -> usize {
        self.model.input_dim()
    }
    fn value(&self, x: &Tensor) -> Result<f64> {
        Ok(self.model.loss_grad(x, self.label)?.0)
    }
    fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        self.model.loss_grad(x, self.label)
    }
}

/// Scalar-output graph seen as a function of one named input, with every
/// other input held fixed.
pub struct GraphLoss {
    graph: Graph,
    input: String,
    dim: usize,
    fixed: Vec<(String, Tensor)>,
}

impl GraphLoss {
    pub fn new(graph: Graph, input: &str, dim: usize, fixed: Vec<(String, Tensor)>) -> Result<Self> {
        if !graph.input_names().iter().any(|n| n == input) {
            return Err(Error::UnknownInput(input.to_string()));
        }
        Ok(Self {
            graph,
            input: input.to_string(),
            dim,
            fixed,
        })
    }

    /// `ℓ(x) = ½ xᵀ A x` for a square matrix `a` given row-major.
    pub fn quadratic(a: &[f64], dim: usize) -> Result<Self> {
        let mut g = Graph::new();
        let am = g.input("A");
        let x = g.input("x");
        let ax = g.matmul(am, x);
        let q = g.dot(x, ax);
        let l = g.scale(q, 0.5);
        g.set_output(l);
        let at = Tensor::new(vec![dim, dim], a.to_vec())?;
        Self::new(g, "x", dim, vec![("A".into(), at)])
    }

    /// `ℓ(x) = wᵀ x`.
    pub fn linear(w: &[f64]) -> Result<Self> {
        let mut g = Graph::new();
        let wn = g.input("w");
        let x = g.input("x");
        let l = g.dot(wn, x);
        g.set_output(l);
        Self::new(g, "x", w.len(), vec![("w".into(), Tensor::from_slice(w))])
    }

    fn bindings<'a>(&'a self, x: &'a Tensor) -> Bindings<'a> {
        let mut b = Bindings::new().bind(&self.input, x);
        for (n, t) in &self.fixed {
            b.insert(n, t);
        }
        b
    }
}

impl InputLoss for GraphLoss {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &Tensor) -> Result<f64> {
        self.graph.forward(&self.bindings(x))?.output().item()
    }
    fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        let tape = self.graph.forward(&self.bindings(x))?;
        let v = tape.output().item()?;
        let mut g = tape.backward()?;
        Ok((v, g.take(&self.input)?))
    }
}

/// Logit-margin loss `f_y(x) − max_{j≠y} f_j(x)`; negative iff misclassified
/// (ties count as misclassified only when another class wins argmax).
pub fn margin_from_logits(logits: &Tensor, y: usize) -> f64 {
    let z = logits.data();
    let other = z
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != y)
        .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v));
    z[y] - other
}

/// Index of the strongest class other than `y`.
pub fn runner_up(logits: &Tensor, y: usize) -> usize {
    let z = logits.data();
    let mut best = if y == 0 { 1 } else { 0 };
    for j in 0..z.len() {
        if j != y && z[j] > z[best] {
            best = j;
        }
    }
    best
}
