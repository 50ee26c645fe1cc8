//! Define-then-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of primitive operations over named
//! inputs. Nodes may only reference earlier nodes, so every graph is acyclic
//! and node order is a valid topological order. Evaluating a graph against a
//! set of [`Bindings`] produces a [`Tape`] holding every intermediate value;
//! [`Tape::backward`] replays it in reverse to obtain gradients of a scalar
//! output with respect to every named input, whether that input is a data
//! point or a parameter tensor.
//!
//! A tape is immutable once built and may be shared between threads.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(usize),
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Dot(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    Softmax(NodeId),
    SoftmaxXent {
        logits: NodeId,
        label: NodeId,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    MaxPool2(NodeId),
    Reshape(NodeId, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::Dot(..) => "dot",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Softplus(_) => "softplus",
            Op::Softmax(_) => "softmax",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2(_) => "maxpool2",
            Op::Reshape(..) => "reshape",
        }
    }
}

/// Computation graph over named inputs.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Op>,
    inputs: Vec<String>,
    output: Option<NodeId>,
}

/// Named tensors fed into a graph evaluation.
#[derive(Clone, Debug, Default)]
pub struct Bindings<'a> {
    map: HashMap<&'a str, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(mut self, name: &'a str, value: &'a Tensor) -> Self {
        self.map.insert(name, value);
        self
    }

    pub fn insert(&mut self, name: &'a str, value: &'a Tensor) {
        self.map.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.map.get(name).copied()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    /// Declares (or reuses) a named free input.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(slot) = self.inputs.iter().position(|n| n == name) {
            let existing = self
                .nodes
                .iter()
                .position(|op| matches!(op, Op::Input(s) if *s == slot))
                .expect("declared input has a node");
            return NodeId(existing);
        }
        self.inputs.push(name.to_string());
        self.push(Op::Input(self.inputs.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value))
    }

    /// Matrix `(m, k)` times vector `(k)` or matrix `(k, n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.push(Op::Scale(a, s))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Dot(a, b))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softplus(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    /// Fused log-softmax + negative log-likelihood. `label` must evaluate to
    /// a one-element tensor holding an integral class index.
    pub fn softmax_xent(&mut self, logits: NodeId, label: NodeId) -> NodeId {
        self.push(Op::SoftmaxXent { logits, label })
    }

    /// Valid (unpadded, stride 1) 2-d convolution. Input `(c, h, w)`,
    /// kernel `(o, c, kh, kw)`, bias `(o)`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::Conv2d { input, kernel, bias })
    }

    /// 2x2 max pooling with stride 2 over `(c, h, w)`; odd trailing rows and
    /// columns are dropped.
    pub fn max_pool2(&mut self, input: NodeId) -> NodeId {
        self.push(Op::MaxPool2(input))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape(a, shape))
    }

    pub fn set_output(&mut self, node: NodeId) {
        self.output = Some(node);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn input_names(&self) -> &[String] {
        &self.inputs
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Evaluates every node; the returned tape caches all intermediates.
    pub fn forward<'a>(&'a self, bindings: &Bindings<'a>) -> Result<Tape<'a>> {
        let output = self.output.ok_or(Error::NoOutput)?;
        let mut values: Vec<Cow<'a, Tensor>> = Vec::with_capacity(self.nodes.len());
        for (idx, op) in self.nodes.iter().enumerate() {
            let value = match op {
                Op::Input(slot) => {
                    let name = &self.inputs[*slot];
                    let bound = bindings.get(name).ok_or_else(|| Error::Unbound(name.clone()))?;
                    if !bound.is_finite() {
                        return Err(Error::NonFinite { op: "input", node: idx });
                    }
                    Cow::Borrowed(bound)
                }
                Op::Constant(t) => Cow::Borrowed(t),
                _ => {
                    let v = eval_op(op, &values)?;
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            op: op.name(),
                            node: idx,
                        });
                    }
                    Cow::Owned(v)
                }
            };
            values.push(value);
        }
        Ok(Tape {
            graph: self,
            values,
            output,
        })
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

fn eval_op(op: &Op, values: &[Cow<'_, Tensor>]) -> Result<Tensor> {
    let v = |id: &NodeId| -> &Tensor { &values[id.0] };
    match op {
        Op::Input(_) | Op::Constant(_) => unreachable!("leaves are handled by the caller"),
        Op::MatMul(a, b) => matmul_forward(v(a), v(b)),
        Op::Add(a, b) | Op::Sub(a, b) => {
            let (x, y) = (v(a), v(b));
            if x.shape() != y.shape() {
                return Err(shape_err(op.name(), format!("{:?} vs {:?}", x.shape(), y.shape())));
            }
            Ok(if matches!(op, Op::Add(..)) { x.add(y) } else { x.sub(y) })
        }
        Op::Scale(a, s) => Ok(v(a).scale(*s)),
        Op::Dot(a, b) => {
            let (x, y) = (v(a), v(b));
            if x.len() != y.len() {
                return Err(shape_err("dot", format!("{:?} vs {:?}", x.shape(), y.shape())));
            }
            Ok(Tensor::scalar(x.dot(y)))
        }
        Op::Relu(a) => Ok(v(a).map(|x| x.max(0.0))),
        Op::Tanh(a) => Ok(v(a).map(f64::tanh)),
        Op::Softplus(a) => Ok(v(a).map(softplus)),
        Op::Softmax(a) => Ok(softmax(v(a))),
        Op::SoftmaxXent { logits, label } => {
            let z = v(logits);
            let y = class_index(v(label), z.len())?;
            let lse = log_sum_exp(z.data());
            Ok(Tensor::scalar((lse - z.data()[y]).max(0.0)))
        }
        Op::Conv2d { input, kernel, bias } => conv2d_forward(v(input), v(kernel), v(bias)),
        Op::MaxPool2(a) => Ok(maxpool_forward(v(a))?.0),
        Op::Reshape(a, shape) => v(a).clone().reshape(shape.clone()),
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &Tensor) -> Tensor {
    let m = z.data().iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = z.map(|v| (v - m).exp());
    let s: f64 = e.data().iter().sum();
    e.scale(1.0 / s)
}

fn class_index(label: &Tensor, num_classes: usize) -> Result<usize> {
    let raw = label.item()?;
    if raw.fract() != 0.0 || raw < 0.0 || raw >= num_classes as f64 {
        return Err(Error::InvalidLabel {
            label: raw,
            num_classes,
        });
    }
    Ok(raw as usize)
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = match a.shape() {
        [m, k] => (*m, *k),
        s => return Err(shape_err("matmul", format!("left operand must be 2-d, got {s:?}"))),
    };
    match b.shape() {
        [kb] if *kb == k => {
            let ad = a.data();
            let bd = b.data();
            let out = (0..m)
                .map(|i| ad[i * k..(i + 1) * k].iter().zip(bd).map(|(x, y)| x * y).sum())
                .collect();
            Ok(Tensor::from_vec(out))
        }
        [kb, n] if *kb == k => {
            let (ad, bd, n) = (a.data(), b.data(), *n);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let aip = ad[i * k + p];
                    let row = &bd[p * n..(p + 1) * n];
                    for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                        *o += aip * bv;
                    }
                }
            }
            Tensor::new(vec![m, n], out)
        }
        s => Err(shape_err("matmul", format!("cannot multiply {:?} by {s:?}", a.shape()))),
    }
}

fn conv_dims(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<[usize; 7]> {
    let (c, h, w) = match input.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(shape_err("conv2d", format!("input must be (c,h,w), got {s:?}"))),
    };
    let (o, kc, kh, kw) = match kernel.shape() {
        [o, kc, kh, kw] => (*o, *kc, *kh, *kw),
        s => return Err(shape_err("conv2d", format!("kernel must be (o,c,kh,kw), got {s:?}"))),
    };
    if kc != c || kh > h || kw > w || bias.len() != o {
        return Err(shape_err(
            "conv2d",
            format!(
                "input {:?}, kernel {:?}, bias {:?}",
                input.shape(),
                kernel.shape(),
                bias.shape()
            ),
        ));
    }
    Ok([c, h, w, o, kh, kw, 0])
}

fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [c, h, w, o, kh, kw, _] = conv_dims(input, kernel, bias)?;
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let (x, k, b) = (input.data(), kernel.data(), bias.data());
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = b[oc];
                for ic in 0..c {
                    for di in 0..kh {
                        let xrow = (ic * h + i + di) * w + j;
                        let krow = ((oc * c + ic) * kh + di) * kw;
                        for dj in 0..kw {
                            acc += x[xrow + dj] * k[krow + dj];
                        }
                    }
                }
                out[(oc * oh + i) * ow + j] = acc;
            }
        }
    }
    Tensor::new(vec![o, oh, ow], out)
}

/// Returns the pooled tensor and, per output cell, the flat index of the
/// selected input cell.
fn maxpool_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = match input.shape() {
        [c, h, w] if *h >= 2 && *w >= 2 => (*c, *h, *w),
        s => return Err(shape_err("maxpool2", format!("input must be (c,h>=2,w>=2), got {s:?}"))),
    };
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = (ch * h + 2 * i) * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (ch * h + 2 * i + di) * w + 2 * j + dj;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, arg))
}

/// Evaluated graph with cached intermediate values.
#[derive(Debug)]
pub struct Tape<'a> {
    graph: &'a Graph,
    values: Vec<Cow<'a, Tensor>>,
    output: NodeId,
}

/// Gradients of a scalar output with respect to every named graph input.
#[derive(Clone, Debug)]
pub struct Gradients {
    names: Vec<String>,
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.grads[i])
            .ok_or_else(|| Error::UnknownInput(name.to_string()))
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownInput(name.to_string()))?;
        Ok(std::mem::replace(&mut self.grads[i], Tensor::scalar(0.0)))
    }
}

impl<'a> Tape<'a> {
    pub fn output(&self) -> &Tensor {
        &self.values[self.output.0]
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node.0]
    }

    /// Reverse sweep from the (scalar) output node.
    pub fn backward(&self) -> Result<Gradients> {
        let out = self.output();
        if !out.is_scalar() {
            return Err(Error::NonScalarOutput(out.shape().to_vec()));
        }
        let n = self.values.len();
        let mut adj: Vec<Option<Tensor>> = vec![None; n];
        adj[self.output.0] = Some(Tensor::full(out.shape(), 1.0));
        let mut input_grads: Vec<Option<Tensor>> = vec![None; self.graph.inputs.len()];

        for idx in (0..=self.output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let op = &self.graph.nodes[idx];
            let val = |id: &NodeId| -> &Tensor { &self.values[id.0] };
            match op {
                Op::Input(slot) => accumulate(&mut input_grads[*slot], g),
                Op::Constant(_) => {}
                Op::MatMul(a, b) => {
                    let (ga, gb) = matmul_backward(val(a), val(b), &g);
                    accumulate(&mut adj[a.0], ga);
                    accumulate(&mut adj[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj[a.0], g.clone());
                    accumulate(&mut adj[b.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj[b.0], g.scale(-1.0));
                    accumulate(&mut adj[a.0], g);
                }
                Op::Scale(a, s) => accumulate(&mut adj[a.0], g.scale(*s)),
                Op::Dot(a, b) => {
                    let s = g.data()[0];
                    accumulate(&mut adj[a.0], val(b).scale(s).reshape(val(a).shape().to_vec())?);
                    accumulate(&mut adj[b.0], val(a).scale(s).reshape(val(b).shape().to_vec())?);
                }
                Op::Relu(a) => {
                    let x = val(a);
                    accumulate(&mut adj[a.0], g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
                }
                Op::Tanh(a) => {
                    let y = &self.values[idx];
                    accumulate(&mut adj[a.0], g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv)));
                }
                Op::Softplus(a) => {
                    let x = val(a);
                    accumulate(&mut adj[a.0], g.zip_map(x, |gv, xv| gv * sigmoid(xv)));
                }
                Op::Softmax(a) => {
                    let y = &self.values[idx];
                    let gy = g.dot(y);
                    accumulate(&mut adj[a.0], y.zip_map(&g, |yv, gv| yv * (gv - gy)));
                }
                Op::SoftmaxXent { logits, label } => {
                    let z = val(logits);
                    let y = class_index(val(label), z.len())?;
                    let mut p = softmax(z);
                    p.data_mut()[y] -= 1.0;
                    accumulate(&mut adj[logits.0], p.scale(g.data()[0]));
                }
                Op::Conv2d { input, kernel, bias } => {
                    let (gi, gk, gb) = conv2d_backward(val(input), val(kernel), &g)?;
                    accumulate(&mut adj[input.0], gi);
                    accumulate(&mut adj[kernel.0], gk);
                    accumulate(&mut adj[bias.0], gb);
                }
                Op::MaxPool2(a) => {
                    let x = val(a);
                    let (_, arg) = maxpool_forward(x)?;
                    let mut gx = Tensor::zeros(x.shape());
                    for (gv, &i) in g.data().iter().zip(&arg) {
                        gx.data_mut()[i] += gv;
                    }
                    accumulate(&mut adj[a.0], gx);
                }
                Op::Reshape(a, _) => {
                    let shape = val(a).shape().to_vec();
                    accumulate(&mut adj[a.0], g.reshape(shape)?);
                }
            }
        }

        let grads = input_grads
            .into_iter()
            .zip(&self.graph.inputs)
            .map(|(g, name)| {
                g.unwrap_or_else(|| {
                    let node = self
                        .graph
                        .nodes
                        .iter()
                        .position(|op| matches!(op, Op::Input(s) if self.graph.inputs[*s] == *name))
                        .expect("input node");
                    Tensor::zeros(self.values[node].shape())
                })
            })
            .collect::<Vec<_>>();
        for (g, name) in grads.iter().zip(&self.graph.inputs) {
            if !g.is_finite() {
                return Err(Error::Poisoned(format!("gradient of `{name}`")));
            }
        }
        Ok(Gradients {
            names: self.graph.inputs.clone(),
            grads,
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign_scaled(1.0, &g),
        None => *slot = Some(g),
    }
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let ad = a.data();
    let bd = b.data();
    let gd = g.data();
    if b.shape().len() == 1 {
        let mut ga = vec![0.0; m * k];
        let mut gb = vec![0.0; k];
        for i in 0..m {
            let gi = gd[i];
            let row = &ad[i * k..(i + 1) * k];
            for p in 0..k {
                ga[i * k + p] = gi * bd[p];
                gb[p] += gi * row[p];
            }
        }
        (Tensor::new(vec![m, k], ga).expect("shape"), Tensor::from_vec(gb))
    } else {
        let n = b.shape()[1];
        let mut ga = vec![0.0; m * k];
        let mut gb = vec![0.0; k * n];
        for i in 0..m {
            for p in 0..k {
                let mut acc = 0.0;
                let aip = ad[i * k + p];
                for j in 0..n {
                    let gij = gd[i * n + j];
                    acc += gij * bd[p * n + j];
                    gb[p * n + j] += aip * gij;
                }
                ga[i * k + p] = acc;
            }
        }
        (
            Tensor::new(vec![m, k], ga).expect("shape"),
            Tensor::new(vec![k, n], gb).expect("shape"),
        )
    }
}

fn conv2d_backward(input: &Tensor, kernel: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (o, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let (x, k, gd) = (input.data(), kernel.data(), g.data());
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gb = vec![0.0; o];
    for oc in 0..o {
        for i in 0..oh {
            for j in 0..ow {
                let go = gd[(oc * oh + i) * ow + j];
                if go == 0.0 {
                    continue;
                }
                gb[oc] += go;
                for ic in 0..c {
                    for di in 0..kh {
                        let xrow = (ic * h + i + di) * w + j;
                        let krow = ((oc * c + ic) * kh + di) * kw;
                        for dj in 0..kw {
                            gx[xrow + dj] += go * k[krow + dj];
                            gk[krow + dj] += go * x[xrow + dj];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
        Tensor::from_vec(gb),
    ))
}

/// Gradient of the scalar output of `graph` with respect to input `wrt`.
pub fn grad(graph: &Graph, bindings: &Bindings<'_>, wrt: &str) -> Result<Tensor> {
    if !graph.inputs.iter().any(|n| n == wrt) {
        return Err(Error::UnknownInput(wrt.to_string()));
    }
    let tape = graph.forward(bindings)?;
    let mut grads = tape.backward()?;
    grads.take(wrt)
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_gradient<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (fp - fm) / (2.0 * step);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_slice(v)
    }

    #[test]
    fn dot_product_forward() {
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.input("w");
        let y = g.dot(x, w);
        g.set_output(y);
        let (xv, wv) = (t(&[1.0, 2.0]), t(&[3.0, 4.0]));
        let tape = g.forward(&Bindings::new().bind("x", &xv).bind("w", &wv)).unwrap();
        assert_eq!(tape.output().item().unwrap(), 11.0);
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.relu(x);
        g.set_output(y);
        let xv = t(&[-1.0, 0.0, 2.0]);
        let tape = g.forward(&Bindings::new().bind("x", &xv)).unwrap();
        assert_eq!(tape.output().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.softmax(x);
        g.set_output(y);
        let xv = t(&[0.0, 0.0, 0.0]);
        let tape = g.forward(&Bindings::new().bind("x", &xv)).unwrap();
        for &p in tape.output().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let y = g.matmul(a, b);
        g.set_output(y);
        let av = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let bv = t(&[1.0, 2.0]);
        let err = g.forward(&Bindings::new().bind("a", &av).bind("b", &bv)).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2]"),
            "{msg}"
        );
    }

    #[test]
    fn quadratic_gradient() {
        // l(x) = 0.5 x^T A x
        let mut g = Graph::new();
        let a = g.input("A");
        let x = g.input("x");
        let ax = g.matmul(a, x);
        let q = g.dot(x, ax);
        let l = g.scale(q, 0.5);
        g.set_output(l);
        let av = Tensor::new(vec![2, 2], vec![2.0, 1.0, 1.0, 3.0]).unwrap();
        let xv = t(&[1.0, 1.0]);
        let gx = grad(&g, &Bindings::new().bind("A", &av).bind("x", &xv), "x").unwrap();
        assert_eq!(gx.data(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_gradient_is_weight() {
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.input("w");
        let y = g.dot(w, x);
        g.set_output(y);
        let wv = t(&[0.3, -1.2, 2.5]);
        for xv in [t(&[0.0, 0.0, 0.0]), t(&[5.0, -3.0, 1.0])] {
            let gx = grad(&g, &Bindings::new().bind("x", &xv).bind("w", &wv), "x").unwrap();
            assert_eq!(gx, wv);
        }
    }

    #[test]
    fn non_scalar_output_and_unknown_name_fail() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.relu(x);
        g.set_output(y);
        let xv = t(&[1.0, 2.0]);
        let b = Bindings::new().bind("x", &xv);
        assert!(matches!(grad(&g, &b, "x"), Err(Error::NonScalarOutput(_))));
        assert!(matches!(grad(&g, &b, "nope"), Err(Error::UnknownInput(_))));
        assert!(matches!(
            g.forward(&Bindings::new()),
            Err(Error::Unbound(name)) if name == "x"
        ));
    }

    #[test]
    fn non_finite_is_located() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.scale(x, 1e308);
        let z = g.scale(y, 10.0);
        g.set_output(z);
        let xv = t(&[1.0]);
        match g.forward(&Bindings::new().bind("x", &xv)) {
            Err(Error::NonFinite { op, node }) => {
                assert_eq!(op, "scale");
                assert_eq!(node, 2);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn invalid_label_rejected() {
        let mut g = Graph::new();
        let z = g.input("z");
        let y = g.input("y");
        let l = g.softmax_xent(z, y);
        g.set_output(l);
        let zv = t(&[0.0, 1.0]);
        for bad in [2.0, -1.0, 0.5] {
            let yv = Tensor::scalar(bad);
            assert!(matches!(
                g.forward(&Bindings::new().bind("z", &zv).bind("y", &yv)),
                Err(Error::InvalidLabel { .. })
            ));
        }
    }

    #[test]
    fn finite_diff_parabola_and_constant() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_gradient(|x| Ok(x.data()[0].powi(2)), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
        let x = t(&[1.0, -2.0, 0.5]);
        let g = finite_diff_gradient(|_| Ok(4.2), &x, 1e-4).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert!(finite_diff_gradient(|_| Ok(0.0), &x, 0.0).is_err());
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut g = Graph::new();
        let w = g.input("w");
        let x = g.input("x");
        let h = g.matmul(w, x);
        let a = g.tanh(h);
        let s = g.dot(a, a);
        g.set_output(s);
        let wv = Tensor::new(vec![3, 2], vec![0.1, -0.7, 0.4, 0.9, -0.2, 0.3]).unwrap();
        let xv = t(&[0.8, -0.6]);
        let b = Bindings::new().bind("w", &wv).bind("x", &xv);
        let t1 = g.forward(&b).unwrap();
        let t2 = g.forward(&b).unwrap();
        assert_eq!(t1.output().data()[0].to_bits(), t2.output().data()[0].to_bits());
        let g1 = t1.backward().unwrap();
        let g2 = t2.backward().unwrap();
        assert_eq!(g1.get("w").unwrap(), g2.get("w").unwrap());
    }
}
