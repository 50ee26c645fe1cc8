//! Curvature-regularized fine-tuning.
//!
//! The penalty is `L_r = ‖∇ℓ(x + hz) − ∇ℓ(x)‖²` with `z` the normalized sign
//! of the input gradient. Its parameter gradient is obtained without
//! second-order differentiation: with `d = ∇ℓ(x₁) − ∇ℓ(x₀)` held fixed,
//! `∇_θ‖d‖² = 2 ∂_θ dᵀ(∇ℓ(x₁) − ∇ℓ(x₀))`, and each mixed term
//! `∂_θ dᵀ∇_xℓ(x)` is a forward difference of `∇_θℓ` along `d`.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{adversarial_accuracy, clean_accuracy, run_attack, AttackSpec};
use crate::curvature::{frobenius_estimate, sample_indices};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::objective::{InputLoss, LabeledLoss};
use crate::optim::{geometric_lr, Adam};
use crate::rng;
use crate::tensor::Tensor;

/// Loss above which training is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CureConfig {
    pub gamma: f64,
    /// Per-epoch weights; the last entry is held once the list runs out.
    /// Overrides `gamma` when non-empty.
    #[serde(default)]
    pub gamma_schedule: Vec<f64>,
    pub h_max: f64,
    pub h_ramp_epochs: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Mixed-derivative step; `None` uses `1e-3·(1 + ‖x‖∞)` per sample.
    #[serde(default)]
    pub mixed_step: Option<f64>,
    /// Evaluation points used for the per-epoch curvature probes.
    #[serde(default = "default_probe_points")]
    pub probe_points: usize,
    /// Gaussian probes per point for the Frobenius estimate.
    #[serde(default = "default_frob_samples")]
    pub frob_samples: usize,
    /// Finite-difference scale of the probes; `None` uses `h_max`.
    #[serde(default)]
    pub probe_h: Option<f64>,
    /// Free-form note on the units of `h`.
    #[serde(default)]
    pub h_units: String,
}

fn default_probe_points() -> usize {
    100
}
fn default_frob_samples() -> usize {
    10
}

impl CureConfig {
    /// γ = 4, h ramped over 5 epochs, Adam decaying from 1e-3 to 1e-4.
    pub fn new(h_max: f64, epochs: usize, seed: u64) -> Self {
        Self {
            gamma: 4.0,
            gamma_schedule: Vec::new(),
            h_max,
            h_ramp_epochs: 5,
            epochs,
            lr_start: 1e-3,
            lr_end: 1e-4,
            batch_size: 32,
            seed,
            mixed_step: None,
            probe_points: default_probe_points(),
            frob_samples: default_frob_samples(),
            probe_h: None,
            h_units: String::new(),
        }
    }

    /// `h_max = 1.5/255 · width`: the same fraction of the data range as
    /// `h = 1.5` on pixel data.
    pub fn for_range(width: f64, epochs: usize, seed: u64) -> Self {
        Self {
            h_units: format!("h_max = 1.5/255 x data range ({width})"),
            ..Self::new(1.5 / 255.0 * width, epochs, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma >= 0.0) || self.gamma_schedule.iter().any(|g| !(*g >= 0.0)) {
            return bad("gamma must be ≥ 0".into());
        }
        if !(self.h_max > 0.0) {
            return bad(format!("h_max must be > 0, got {}", self.h_max));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return bad(format!(
                "need lr_start ≥ lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if let Some(e) = self.mixed_step {
            if !(e > 0.0) {
                return bad(format!("mixed_step must be > 0, got {e}"));
            }
        }
        if let Some(h) = self.probe_h {
            if !(h > 0.0) {
                return bad(format!("probe_h must be > 0, got {h}"));
            }
        }
        Ok(())
    }

    pub fn gamma_at(&self, epoch: usize) -> f64 {
        match self.gamma_schedule.last() {
            None => self.gamma,
            Some(&last) => self.gamma_schedule.get(epoch).copied().unwrap_or(last),
        }
    }

    /// Linear ramp `0 → h_max` over the first `h_ramp_epochs` epochs,
    /// advanced once per optimizer step.
    pub fn h_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let ramp = self.h_ramp_epochs * steps_per_epoch;
        if ramp == 0 {
            self.h_max
        } else {
            self.h_max * ((step + 1) as f64 / ramp as f64).min(1.0)
        }
    }

    fn probe_scale(&self) -> f64 {
        self.probe_h.unwrap_or(self.h_max)
    }
}

/// Curvature and robustness measurements at one point of training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochProbe {
    /// Mean Hutchinson estimate of `‖H‖_F` over the probe points.
    pub frobenius: f64,
    /// Mean `‖Hz‖` along the penalty direction.
    pub hz_norm: f64,
    pub adv_accuracy: f64,
    pub clean_accuracy: f64,
    /// Mean `L_r` at the probe scale.
    pub mean_penalty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub epoch: usize,
    /// Mean clean loss over the epoch's training samples.
    pub train_loss: f64,
    /// Mean penalty over the epoch's training samples (0 when γ = 0).
    pub train_penalty: f64,
    pub gamma: f64,
    pub h: f64,
    pub lr: f64,
    pub probe: Option<EpochProbe>,
}

/// Pre-training snapshot plus one record per completed epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub initial: Option<EpochProbe>,
    pub records: Vec<TrainingRecord>,
}

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last_probe(&self) -> Option<EpochProbe> {
        self.records.iter().rev().find_map(|r| r.probe)
    }

    /// Epoch 0 is the snapshot before training.
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("epoch,frob,hz_norm,adv_acc,clean_acc,mean_penalty,train_loss,train_penalty,gamma,h,lr\n");
        let probe_cells = |p: &Option<EpochProbe>| match p {
            Some(p) => format!(
                "{:e},{:e},{},{},{:e}",
                p.frobenius, p.hz_norm, p.adv_accuracy, p.clean_accuracy, p.mean_penalty
            ),
            None => ",,,,".to_string(),
        };
        if self.initial.is_some() {
            let _ = writeln!(s, "0,{},,,,,", probe_cells(&self.initial));
        }
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{},{:e},{:e}",
                r.epoch,
                probe_cells(&r.probe),
                r.train_loss,
                r.train_penalty,
                r.gamma,
                r.h,
                r.lr
            );
        }
        s
    }
}

/// `sign(g)/‖sign(g)‖`; zero coordinates stay zero.
pub fn sign_direction(g: &Tensor) -> Result<Tensor> {
    let s = g.map(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    });
    let n = s.norm2();
    if n == 0.0 {
        return Err(Error::ZeroGradient("penalty direction undefined"));
    }
    Ok(s.scale(1.0 / n))
}

/// Penalty direction at `(x, y)`.
pub fn cure_direction(net: &Network, x: &Tensor, y: usize) -> Result<Tensor> {
    sign_direction(&net.loss_input_grad(x, y)?.1)
}

/// `‖∇ℓ(x + hz) − ∇ℓ(x)‖²` along a given direction.
pub fn cure_penalty_along<L: InputLoss + ?Sized>(loss: &L, x: &Tensor, z: &Tensor, h: f64) -> Result<f64> {
    check_h(h)?;
    let d = loss.grad(&x.axpy(h, z))?.sub(&loss.grad(x)?);
    Ok(d.dot(&d))
}

/// `L_r` with `z` the normalized gradient sign at `x`.
pub fn cure_penalty<L: InputLoss + ?Sized>(loss: &L, x: &Tensor, h: f64) -> Result<f64> {
    check_h(h)?;
    let g0 = loss.grad(x)?;
    let z = sign_direction(&g0)?;
    let d = loss.grad(&x.axpy(h, &z))?.sub(&g0);
    Ok(d.dot(&d))
}

fn check_h(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("h must be > 0, got {h}")))
    }
}

/// Default mixed-derivative step for input `x`.
pub fn default_mixed_step(x: &Tensor) -> f64 {
    1e-3 * (1.0 + x.norm_inf())
}

/// Penalty value and its parameter gradient, aligned with `Network::params`.
#[derive(Clone, Debug)]
pub struct CureGradient {
    pub penalty: f64,
    pub direction: Tensor,
    pub params: Vec<Tensor>,
}

fn param_grads(net: &Network, x: &Tensor, y: usize) -> Result<Vec<Tensor>> {
    Ok(net.loss_grads(x, y)?.params)
}

/// Computes the penalty gradient reusing the clean-point gradients.
fn cure_gradient_from(
    net: &Network,
    x: &Tensor,
    y: usize,
    h: f64,
    eps_m: Option<f64>,
    base_input: &Tensor,
    base_params: &[Tensor],
) -> Result<Option<CureGradient>> {
    let Ok(z) = sign_direction(base_input) else {
        return Ok(None);
    };
    let x1 = x.axpy(h, &z);
    let at1 = net.loss_grads(&x1, y)?;
    let d = at1.input.sub(base_input);
    let penalty = d.dot(&d);
    let dn = d.norm2();
    if dn == 0.0 {
        return Ok(Some(CureGradient {
            penalty,
            direction: z,
            params: base_params.iter().map(|p| p.scale(0.0)).collect(),
        }));
    }
    // Shift by ε_m along the unit direction so the input step stays small
    // however large ‖d‖ gets.
    let eps = eps_m.unwrap_or_else(|| default_mixed_step(x));
    let step = eps / dn;
    let p1e = param_grads(net, &x1.axpy(step, &d), y)?;
    let p0e = param_grads(net, &x.axpy(step, &d), y)?;
    let scale = 2.0 / step;
    let params = p1e
        .iter()
        .zip(&at1.params)
        .zip(&p0e)
        .zip(base_params)
        .map(|(((a, b), c), e)| {
            let t = Tensor::new(
                a.shape().to_vec(),
                a.data()
                    .iter()
                    .zip(b.data())
                    .zip(c.data())
                    .zip(e.data())
                    .map(|(((a, b), c), e)| scale * ((a - b) - (c - e)))
                    .collect(),
            )?;
            t.ensure_finite("penalty parameter gradient")?;
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(CureGradient {
        penalty,
        direction: z,
        params,
    }))
}

/// Finite-difference estimate of `∇_θ L_r(x)` via the mixed second
/// derivative, with `z` treated as constant in `θ`.
pub fn cure_param_gradient(net: &Network, x: &Tensor, y: usize, h: f64, eps_m: Option<f64>) -> Result<CureGradient> {
    check_h(h)?;
    if let Some(e) = eps_m {
        if !(e > 0.0) {
            return Err(Error::InvalidArgument(format!("mixed step must be > 0, got {e}")));
        }
    }
    let base = net.loss_grads(x, y)?;
    cure_gradient_from(net, x, y, h, eps_m, &base.input, &base.params)?
        .ok_or(Error::ZeroGradient("penalty direction undefined"))
}

struct SampleTerms {
    loss: f64,
    penalty: f64,
    grads: Vec<Tensor>,
}

fn sample_terms(net: &Network, x: &Tensor, y: usize, gamma: f64, h: f64, eps_m: Option<f64>) -> Result<SampleTerms> {
    let base = net.loss_grads(x, y)?;
    let mut grads = base.params;
    let mut penalty = 0.0;
    if gamma > 0.0 && h > 0.0 {
        if let Some(cg) = cure_gradient_from(net, x, y, h, eps_m, &base.input, &grads)? {
            for (g, c) in grads.iter_mut().zip(&cg.params) {
                g.add_assign_scaled(gamma, c);
            }
            penalty = cg.penalty;
        }
    }
    Ok(SampleTerms {
        loss: base.loss,
        penalty,
        grads,
    })
}

/// Curvature probes on a fixed subset of `eval` plus accuracies.
pub fn probe_epoch(
    net: &Network,
    eval: &Dataset,
    config: &CureConfig,
    attack: &AttackSpec,
    points: &[usize],
) -> Result<EpochProbe> {
    let h = config.probe_scale();
    let frob_seed = rng::derive_seed(config.seed, "frobenius");
    let per_point = points
        .par_iter()
        .map(|&i| {
            let (x, y) = (&eval.inputs[i], eval.labels[i]);
            let loss = LabeledLoss::new(net, y);
            let frob = frobenius_estimate(&loss, x, h, config.frob_samples, rng::sample_seed(frob_seed, i))?;
            let g0 = loss.grad(x)?;
            let (pen, hz) = match sign_direction(&g0) {
                Ok(z) => {
                    let d = loss.grad(&x.axpy(h, &z))?.sub(&g0);
                    (d.dot(&d), d.norm2() / h)
                }
                Err(_) => (0.0, 0.0),
            };
            Ok((frob, hz, pen))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_point.len().max(1) as f64;
    let (mut frob, mut hz, mut pen) = (0.0, 0.0, 0.0);
    for (f, z, p) in &per_point {
        frob += f;
        hz += z;
        pen += p;
    }
    Ok(EpochProbe {
        frobenius: frob / n,
        hz_norm: hz / n,
        adv_accuracy: adversarial_accuracy(net, eval, attack)?,
        clean_accuracy: clean_accuracy(net, eval)?,
        mean_penalty: pen / n,
    })
}

/// Per-epoch evaluation settings; `None` skips probing.
pub struct Monitor<'a> {
    pub eval: &'a Dataset,
    pub attack: &'a AttackSpec,
}

fn diverged(epoch: usize, loss: f64, history: &TrainingHistory) -> Error {
    Error::Diverged {
        epoch,
        loss,
        history: Box::new(history.clone()),
    }
}

/// Replaces a training input by a perturbed copy against the current weights.
pub type InputMap<'a> = &'a (dyn Fn(&Network, &Tensor, usize) -> Result<Tensor> + Sync);

/// Minimizes `mean ℓ + γ·mean L_r` over mini-batches with Adam. With γ = 0
/// the penalty is never evaluated and this is plain cross-entropy training.
pub fn train_loop(
    net: Network,
    train: &Dataset,
    config: &CureConfig,
    monitor: Option<Monitor<'_>>,
) -> Result<(Network, TrainingHistory)> {
    train_loop_mapped(net, train, config, monitor, None)
}

/// [`train_loop`] with every batch input passed through `map` first.
pub fn train_loop_mapped(
    mut net: Network,
    train: &Dataset,
    config: &CureConfig,
    monitor: Option<Monitor<'_>>,
    map: Option<InputMap<'_>>,
) -> Result<(Network, TrainingHistory)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut history = TrainingHistory::default();
    let probe_points = monitor.as_ref().map(|m| {
        sample_indices(
            m.eval.len(),
            config.probe_points,
            rng::derive_seed(config.seed, "probe-points"),
        )
    });
    if let (Some(m), Some(pts)) = (&monitor, &probe_points) {
        history.initial = Some(probe_epoch(&net, m.eval, config, m.attack, pts)?);
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = rng::rng(rng::derive_seed(config.seed, "shuffle"));
    let mut opt = Adam::new(net.params().iter().map(|p| &p.value));
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let mut step = 0usize;
    let start_epochs = net.meta.epochs;
    for epoch in 0..config.epochs {
        let gamma = config.gamma_at(epoch);
        let lr = geometric_lr(config.lr_start, config.lr_end, epoch, config.epochs);
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut penalty_sum = 0.0;
        let mut h = 0.0;
        for batch in order.chunks(config.batch_size) {
            h = config.h_at(step, steps_per_epoch);
            let terms = batch
                .par_iter()
                .map(|&i| {
                    let (x, y) = (&train.inputs[i], train.labels[i]);
                    match map {
                        Some(f) => sample_terms(&net, &f(&net, x, y)?, y, gamma, h, config.mixed_step),
                        None => sample_terms(&net, x, y, gamma, h, config.mixed_step),
                    }
                })
                .collect::<Vec<_>>();
            let mut acc: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0;
            for t in terms {
                let t = match t {
                    Ok(t) => t,
                    Err(Error::NonFinite { .. } | Error::Poisoned(_)) => {
                        return Err(diverged(epoch + 1, f64::NAN, &history));
                    }
                    Err(e) => return Err(e),
                };
                batch_loss += t.loss;
                penalty_sum += t.penalty;
                match acc.as_mut() {
                    None => acc = Some(t.grads),
                    Some(a) => {
                        for (s, g) in a.iter_mut().zip(&t.grads) {
                            s.add_assign_scaled(1.0, g);
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let grads: Vec<Tensor> = acc.expect("non-empty batch").iter().map(|g| g.scale(inv)).collect();
            let mean_loss = batch_loss * inv;
            if !mean_loss.is_finite() || mean_loss > DIVERGENCE_LOSS || grads.iter().any(|g| !g.is_finite()) {
                return Err(diverged(epoch + 1, mean_loss, &history));
            }
            opt.step(net.param_values_mut(), &grads, lr);
            loss_sum += batch_loss;
            step += 1;
        }
        net.meta.epochs = start_epochs + epoch as u32 + 1;
        let probe = match (&monitor, &probe_points) {
            (Some(m), Some(pts)) => Some(probe_epoch(&net, m.eval, config, m.attack, pts)?),
            _ => None,
        };
        history.records.push(TrainingRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            train_penalty: penalty_sum / train.len() as f64,
            gamma,
            h,
            lr,
            probe,
        });
        log::debug!(
            "epoch {} loss {:.4} gamma {} h {:.4e}",
            epoch + 1,
            loss_sum / train.len() as f64,
            gamma,
            h
        );
    }
    Ok((net, history))
}

/// Fine-tunes `net` on `ℓ + γ L_r`, probing curvature and robustness on
/// `eval` after every epoch.
pub fn finetune_cure(
    net: Network,
    train: &Dataset,
    eval: &Dataset,
    config: &CureConfig,
    attack: &AttackSpec,
) -> Result<(Network, TrainingHistory)> {
    train_loop(net, train, config, Some(Monitor { eval, attack }))
}

/// Plain training on inputs replaced by `perturb` attacks recomputed each
/// batch; `config.gamma` is ignored.
pub fn finetune_adversarial(
    net: Network,
    train: &Dataset,
    eval: &Dataset,
    config: &CureConfig,
    perturb: &AttackSpec,
    attack: &AttackSpec,
) -> Result<(Network, TrainingHistory)> {
    perturb.validate()?;
    let config = CureConfig {
        gamma: 0.0,
        gamma_schedule: Vec::new(),
        ..config.clone()
    };
    let bounds = train.range;
    let map = |n: &Network, x: &Tensor, y: usize| match run_attack(n, x, y, perturb, bounds) {
        Ok(r) => Ok(r.x_adv),
        Err(Error::ZeroGradient(_)) => Ok(x.clone()),
        Err(e) => Err(e),
    };
    train_loop_mapped(net, train, &config, Some(Monitor { eval, attack }), Some(&map))
}
