//! Feed-forward classifiers, the cross-entropy loss and checkpoints.

use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Bindings, Graph, NodeId};
use crate::tensor::Tensor;

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Softplus,
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}

/// One entry of a network's layer table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Affine {
        inputs: usize,
        outputs: usize,
    },
    /// Valid 2-d convolution with a square kernel over `(channels, height, width)`.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        height: usize,
        width: usize,
    },
    MaxPool {
        channels: usize,
        height: usize,
        width: usize,
    },
    Act {
        activation: Activation,
        width: usize,
    },
}

impl LayerSpec {
    pub fn affine(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Affine { inputs, outputs }
    }

    pub fn act(activation: Activation, width: usize) -> Self {
        LayerSpec::Act { activation, width }
    }

    pub fn in_dim(&self) -> usize {
        match *self {
            LayerSpec::Affine { inputs, .. } => inputs,
            LayerSpec::Conv {
                in_channels,
                height,
                width,
                ..
            } => in_channels * height * width,
            LayerSpec::MaxPool {
                channels,
                height,
                width,
            } => channels * height * width,
            LayerSpec::Act { width, .. } => width,
        }
    }

    pub fn out_dim(&self) -> usize {
        match *self {
            LayerSpec::Affine { outputs, .. } => outputs,
            LayerSpec::Conv {
                out_channels,
                kernel,
                height,
                width,
                ..
            } => out_channels * (height + 1).saturating_sub(kernel) * (width + 1).saturating_sub(kernel),
            LayerSpec::MaxPool {
                channels,
                height,
                width,
            } => channels * (height / 2) * (width / 2),
            LayerSpec::Act { width, .. } => width,
        }
    }

    fn tag(&self) -> u8 {
        match self {
            LayerSpec::Affine { .. } => 0,
            LayerSpec::Conv { .. } => 1,
            LayerSpec::MaxPool { .. } => 2,
            LayerSpec::Act {
                activation: Activation::Relu,
                ..
            } => 3,
            LayerSpec::Act {
                activation: Activation::Tanh,
                ..
            } => 4,
            LayerSpec::Act {
                activation: Activation::Softplus,
                ..
            } => 5,
        }
    }

    fn dims(&self) -> Vec<usize> {
        match *self {
            LayerSpec::Affine { inputs, outputs } => vec![inputs, outputs],
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                height,
                width,
            } => vec![in_channels, out_channels, kernel, height, width],
            LayerSpec::MaxPool {
                channels,
                height,
                width,
            } => vec![channels, height, width],
            LayerSpec::Act { width, .. } => vec![width],
        }
    }

    fn dims_for_tag(tag: u8) -> Option<usize> {
        match tag {
            0 => Some(2),
            1 => Some(5),
            2 => Some(3),
            3..=5 => Some(1),
            _ => None,
        }
    }

    fn from_tag(tag: u8, d: &[usize]) -> Option<Self> {
        Some(match tag {
            0 => LayerSpec::affine(d[0], d[1]),
            1 => LayerSpec::Conv {
                in_channels: d[0],
                out_channels: d[1],
                kernel: d[2],
                height: d[3],
                width: d[4],
            },
            2 => LayerSpec::MaxPool {
                channels: d[0],
                height: d[1],
                width: d[2],
            },
            3 => LayerSpec::act(Activation::Relu, d[0]),
            4 => LayerSpec::act(Activation::Tanh, d[0]),
            5 => LayerSpec::act(Activation::Softplus, d[0]),
            _ => return None,
        })
    }

    /// Parameter shapes `(weight, bias)` for layers that carry parameters.
    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Affine { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((vec![out_channels, in_channels, kernel, kernel], vec![out_channels])),
            _ => None,
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::InvalidLayer {
                index,
                reason: reason.to_string(),
            })
        };
        if self.dims().contains(&0) {
            return bad("zero dimension");
        }
        match *self {
            LayerSpec::Conv {
                kernel, height, width, ..
            } if kernel > height || kernel > width => bad("kernel larger than input"),
            LayerSpec::MaxPool { height, width, .. } if height < 2 || width < 2 => {
                bad("pooling input smaller than 2x2")
            }
            _ => Ok(()),
        }
    }
}

/// Reference architectures.
pub mod arch {
    use super::{Activation, LayerSpec};

    /// 2 → 32 → 32 → 2.
    pub fn mlp_2d(act: Activation) -> Vec<LayerSpec> {
        vec![
            LayerSpec::affine(2, 32),
            LayerSpec::act(act, 32),
            LayerSpec::affine(32, 32),
            LayerSpec::act(act, 32),
            LayerSpec::affine(32, 2),
        ]
    }

    /// d → 256 → 128 → K.
    pub fn mlp_img(input_dim: usize, classes: usize, act: Activation) -> Vec<LayerSpec> {
        vec![
            LayerSpec::affine(input_dim, 256),
            LayerSpec::act(act, 256),
            LayerSpec::affine(256, 128),
            LayerSpec::act(act, 128),
            LayerSpec::affine(128, classes),
        ]
    }

    /// conv3x3(8) → act → pool → conv3x3(16) → act → pool → affine(64) → act → K.
    pub fn convnet_img(
        channels: usize,
        height: usize,
        width: usize,
        classes: usize,
        act: Activation,
    ) -> Vec<LayerSpec> {
        let (h1, w1) = (height - 2, width - 2);
        let (h2, w2) = (h1 / 2, w1 / 2);
        let (h3, w3) = (h2 - 2, w2 - 2);
        let (h4, w4) = (h3 / 2, w3 / 2);
        vec![
            LayerSpec::Conv {
                in_channels: channels,
                out_channels: 8,
                kernel: 3,
                height,
                width,
            },
            LayerSpec::act(act, 8 * h1 * w1),
            LayerSpec::MaxPool {
                channels: 8,
                height: h1,
                width: w1,
            },
            LayerSpec::Conv {
                in_channels: 8,
                out_channels: 16,
                kernel: 3,
                height: h2,
                width: w2,
            },
            LayerSpec::act(act, 16 * h3 * w3),
            LayerSpec::MaxPool {
                channels: 16,
                height: h3,
                width: w3,
            },
            LayerSpec::affine(16 * h4 * w4, 64),
            LayerSpec::act(act, 64),
            LayerSpec::affine(64, classes),
        ]
    }
}

/// Named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug)]
struct Graphs {
    loss: Graph,
    logits: Graph,
    combo: Graph,
}

/// Provenance stored alongside parameters in checkpoints.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: u32,
}

/// Feed-forward classifier `f_θ` with a softmax cross-entropy head.
#[derive(Clone, Debug)]
pub struct Network {
    layers: Vec<LayerSpec>,
    params: Vec<Param>,
    input_dim: usize,
    num_classes: usize,
    pub meta: TrainingMeta,
    graphs: Arc<Graphs>,
}

/// Loss value with gradients w.r.t. the input and every parameter.
#[derive(Clone, Debug)]
pub struct LossGrads {
    pub loss: f64,
    pub input: Tensor,
    pub params: Vec<Tensor>,
}

pub const INPUT: &str = "x";
const LABEL: &str = "label";
const COEFF: &str = "coeff";

fn check_chain(layers: &[LayerSpec]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::InvalidLayer {
            index: 0,
            reason: "empty layer list".into(),
        });
    }
    for (i, l) in layers.iter().enumerate() {
        l.validate(i)?;
    }
    for (i, pair) in layers.windows(2).enumerate() {
        if pair[0].out_dim() != pair[1].in_dim() {
            return Err(Error::DimensionChain {
                left: i,
                right: i + 1,
                out_dim: pair[0].out_dim(),
                in_dim: pair[1].in_dim(),
            });
        }
    }
    Ok(())
}

fn param_names(i: usize) -> (String, String) {
    (format!("layer{i}.weight"), format!("layer{i}.bias"))
}

/// Appends the network body to `g` and returns the logits node.
fn build_body(g: &mut Graph, layers: &[LayerSpec]) -> NodeId {
    let mut cur = g.input(INPUT);
    let mut spatial = false;
    for (i, layer) in layers.iter().enumerate() {
        let (wn, bn) = param_names(i);
        cur = match *layer {
            LayerSpec::Affine { inputs, .. } => {
                if spatial {
                    cur = g.reshape(cur, vec![inputs]);
                    spatial = false;
                }
                let w = g.input(&wn);
                let b = g.input(&bn);
                let wx = g.matmul(w, cur);
                g.add(wx, b)
            }
            LayerSpec::Conv {
                in_channels,
                height,
                width,
                ..
            } => {
                if !spatial {
                    cur = g.reshape(cur, vec![in_channels, height, width]);
                    spatial = true;
                }
                let k = g.input(&wn);
                let b = g.input(&bn);
                g.conv2d(cur, k, b)
            }
            LayerSpec::MaxPool {
                channels,
                height,
                width,
            } => {
                if !spatial {
                    cur = g.reshape(cur, vec![channels, height, width]);
                    spatial = true;
                }
                g.max_pool2(cur)
            }
            LayerSpec::Act { activation, .. } => match activation {
                Activation::Relu => g.relu(cur),
                Activation::Tanh => g.tanh(cur),
                Activation::Softplus => g.softplus(cur),
            },
        };
    }
    if spatial {
        let out = layers.last().map(LayerSpec::out_dim).unwrap_or(0);
        cur = g.reshape(cur, vec![out]);
    }
    cur
}

fn compile(layers: &[LayerSpec]) -> Graphs {
    let mut logits = Graph::new();
    let z = build_body(&mut logits, layers);
    logits.set_output(z);

    let mut loss = Graph::new();
    let z = build_body(&mut loss, layers);
    let y = loss.input(LABEL);
    let l = loss.softmax_xent(z, y);
    loss.set_output(l);

    let mut combo = Graph::new();
    let z = build_body(&mut combo, layers);
    let c = combo.input(COEFF);
    let s = combo.dot(z, c);
    combo.set_output(s);

    Graphs { loss, logits, combo }
}

/// Builds a network with fan-in-scaled uniform initialization
/// `U(-1/√fan_in, 1/√fan_in)` drawn from a generator seeded by `seed`.
pub fn build_network(layers: &[LayerSpec], seed: u64) -> Result<Network> {
    check_chain(layers)?;
    let mut rng = rng::rng(seed);
    let mut params = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        if let Some((wshape, bshape)) = layer.param_shapes() {
            let fan_in: usize = wshape[1..].iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            let (wn, bn) = param_names(i);
            for (name, shape) in [(wn, wshape), (bn, bshape)] {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                params.push(Param {
                    name,
                    value: Tensor::new(shape, data)?,
                });
            }
        }
    }
    Network::assemble(layers.to_vec(), params, TrainingMeta { seed, epochs: 0 })
}

impl Network {
    fn assemble(layers: Vec<LayerSpec>, params: Vec<Param>, meta: TrainingMeta) -> Result<Self> {
        check_chain(&layers)?;
        let input_dim = layers[0].in_dim();
        let num_classes = layers.last().expect("non-empty").out_dim();
        let graphs = Arc::new(compile(&layers));
        Ok(Self {
            layers,
            params,
            input_dim,
            num_classes,
            meta,
            graphs,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Mutable access to parameter values; names and shapes are fixed.
    pub fn param_values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != [self.input_dim] {
            return Err(Error::ShapeMismatch {
                op: "network input",
                detail: format!("expected [{}], got {:?}", self.input_dim, x.shape()),
            });
        }
        Ok(())
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.num_classes {
            return Err(Error::InvalidLabel {
                label: y as f64,
                num_classes: self.num_classes,
            });
        }
        Ok(())
    }

    fn bindings<'a>(&'a self, x: &'a Tensor) -> Bindings<'a> {
        let mut b = Bindings::new().bind(INPUT, x);
        for p in &self.params {
            b.insert(&p.name, &p.value);
        }
        b
    }

    /// Pre-softmax scores `f_θ(x)`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let tape = self.graphs.logits.forward(&self.bindings(x))?;
        Ok(tape.output().clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(self.logits(x)?.argmax())
    }

    /// `ℓ(x) = XEnt(f_θ(x), y)`, log-sum-exp stabilized.
    pub fn xent_loss(&self, x: &Tensor, y: usize) -> Result<f64> {
        self.check_input(x)?;
        self.check_label(y)?;
        let label = Tensor::scalar(y as f64);
        let mut b = self.bindings(x);
        b.insert(LABEL, &label);
        self.graphs.loss.forward(&b)?.output().item()
    }

    /// Loss and its gradient with respect to the input.
    pub fn loss_input_grad(&self, x: &Tensor, y: usize) -> Result<(f64, Tensor)> {
        self.check_input(x)?;
        self.check_label(y)?;
        let label = Tensor::scalar(y as f64);
        let mut b = self.bindings(x);
        b.insert(LABEL, &label);
        let tape = self.graphs.loss.forward(&b)?;
        let loss = tape.output().item()?;
        let mut g = tape.backward()?;
        Ok((loss, g.take(INPUT)?))
    }

    /// Loss with gradients w.r.t. the input and all parameters (one backward pass).
    pub fn loss_grads(&self, x: &Tensor, y: usize) -> Result<LossGrads> {
        self.check_input(x)?;
        self.check_label(y)?;
        let label = Tensor::scalar(y as f64);
        let mut b = self.bindings(x);
        b.insert(LABEL, &label);
        let tape = self.graphs.loss.forward(&b)?;
        let loss = tape.output().item()?;
        let mut g = tape.backward()?;
        let input = g.take(INPUT)?;
        let params = self
            .params
            .iter()
            .map(|p| g.take(&p.name))
            .collect::<Result<Vec<_>>>()?;
        Ok(LossGrads { loss, input, params })
    }

    /// Value and input-gradient of `coeffᵀ f_θ(x)`.
    pub fn logit_combination_grad(&self, x: &Tensor, coeff: &Tensor) -> Result<(f64, Tensor)> {
        self.check_input(x)?;
        if coeff.len() != self.num_classes {
            return Err(Error::ShapeMismatch {
                op: "logit combination",
                detail: format!("{} coefficients for {} classes", coeff.len(), self.num_classes),
            });
        }
        let mut b = self.bindings(x);
        b.insert(COEFF, coeff);
        let tape = self.graphs.combo.forward(&b)?;
        let v = tape.output().item()?;
        let mut g = tape.backward()?;
        Ok((v, g.take(INPUT)?))
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, checkpoint::encode(self))?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
        let bytes = std::fs::read(path)?;
        checkpoint::decode(&bytes)
    }
}

/// Binary checkpoint layout (all integers little-endian):
///
/// ```text
/// magic      8 bytes  "CURVLAB\0"
/// version    u32      1
/// layers     u32      count, then per layer: u8 kind tag, u32 dims
/// params     per parameter: u16 name length, UTF-8 name,
///                           u64 element count, f64 data
/// seed       u64
/// epochs     u32
/// ```
///
/// Kind tags: 0 affine `[in, out]`, 1 conv `[in_ch, out_ch, k, h, w]`,
/// 2 max-pool `[ch, h, w]`, 3 relu / 4 tanh / 5 softplus `[width]`.
/// Parameters appear in layer order, weight before bias.
pub mod checkpoint {
    use super::*;

    pub const MAGIC: &[u8; 8] = b"CURVLAB\0";
    pub const VERSION: u32 = 1;

    pub fn encode(net: &Network) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
        for layer in &net.layers {
            out.push(layer.tag());
            for d in layer.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for p in &net.params {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.len() as u64).to_le_bytes());
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&net.meta.seed.to_le_bytes());
        out.extend_from_slice(&net.meta.epochs.to_le_bytes());
        out
    }

    struct Reader<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            let remaining = self.bytes.len() - self.pos;
            if remaining < n {
                return Err(Error::Truncated {
                    offset: self.pos,
                    needed: n - remaining,
                });
            }
            let s = &self.bytes[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }

        fn u8(&mut self) -> Result<u8> {
            Ok(self.take(1)?[0])
        }

        fn u16(&mut self) -> Result<u16> {
            Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
        }

        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
        }

        fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Network> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r
            .take(MAGIC.len())
            .map_err(|_| Error::BadMagic { found: bytes.to_vec() })?;
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic.to_vec() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers.min(1024));
        for i in 0..n_layers {
            let tag = r.u8()?;
            let nd = LayerSpec::dims_for_tag(tag)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("layer {i}: unknown kind tag {tag}")))?;
            let dims = (0..nd)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            layers.push(LayerSpec::from_tag(tag, &dims).expect("tag checked"));
        }
        check_chain(&layers)?;
        let mut params = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            let Some((wshape, bshape)) = layer.param_shapes() else {
                continue;
            };
            let (wn, bn) = param_names(i);
            for (expected, shape) in [(wn, wshape), (bn, bshape)] {
                let name_len = r.u16()? as usize;
                let name = std::str::from_utf8(r.take(name_len)?)
                    .map_err(|e| Error::CorruptCheckpoint(format!("parameter name: {e}")))?;
                if name != expected {
                    return Err(Error::CorruptCheckpoint(format!(
                        "expected parameter `{expected}`, found `{name}`"
                    )));
                }
                let count = r.u64()? as usize;
                let want: usize = shape.iter().product();
                if count != want {
                    return Err(Error::CorruptCheckpoint(format!(
                        "parameter `{name}` has {count} elements, layer table implies {want}"
                    )));
                }
                let raw = r.take(
                    count
                        .checked_mul(8)
                        .ok_or_else(|| Error::CorruptCheckpoint("element count overflow".into()))?,
                )?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                params.push(Param {
                    name: expected,
                    value: Tensor::new(shape, data)?,
                });
            }
        }
        let seed = r.u64()?;
        let epochs = r.u32()?;
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes after offset {}",
                bytes.len() - r.pos,
                r.pos
            )));
        }
        Network::assemble(layers, params, TrainingMeta { seed, epochs })
    }
}
