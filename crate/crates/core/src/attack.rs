//! ℓ∞-budgeted adversarial attacks and robustness evaluation.
//!
//! FGSM and PGD ascend the cross-entropy loss with signed gradients;
//! DeepFool iteratively linearizes the classifier and steps to the nearest
//! class boundary; SPSA descends the logit margin using only forward
//! evaluations.

use std::fmt::Write as _;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ValueRange};
use crate::error::{Error, Result};
use crate::objective::{margin_from_logits, DifferentiableModel, InputLoss, LabeledLoss, LogitModel};
use crate::optim::AdamState;
use crate::rng;
use crate::tensor::Tensor;

pub const DEEPFOOL_OVERSHOOT: f64 = 0.02;
pub const DEEPFOOL_MAX_ITERS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackFamily {
    Fgsm,
    Pgd,
    DeepfoolL2,
    DeepfoolLinf,
    Spsa,
}

impl std::fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::Pgd => "pgd",
            AttackFamily::DeepfoolL2 => "deepfool-l2",
            AttackFamily::DeepfoolLinf => "deepfool-linf",
            AttackFamily::Spsa => "spsa",
        })
    }
}

impl std::str::FromStr for AttackFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fgsm" => AttackFamily::Fgsm,
            "pgd" => AttackFamily::Pgd,
            "deepfool-l2" => AttackFamily::DeepfoolL2,
            "deepfool-linf" => AttackFamily::DeepfoolLinf,
            "spsa" => AttackFamily::Spsa,
            other => return Err(Error::InvalidArgument(format!("unknown attack `{other}`"))),
        })
    }
}

/// Attack family and hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub family: AttackFamily,
    /// ℓ∞ budget in input units.
    pub epsilon: f64,
    pub steps: usize,
    /// Defaults to `2.5·ε/steps` for PGD and `ε/10` for SPSA.
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "default_spsa_batch")]
    pub spsa_batch: usize,
    #[serde(default = "default_spsa_delta")]
    pub spsa_delta: f64,
    #[serde(default = "default_true")]
    pub random_start: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_spsa_batch() -> usize {
    128
}
fn default_spsa_delta() -> f64 {
    0.01
}
fn default_true() -> bool {
    true
}

impl AttackSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            family: AttackFamily::Fgsm,
            epsilon,
            steps: 1,
            step_size: None,
            spsa_batch: default_spsa_batch(),
            spsa_delta: default_spsa_delta(),
            random_start: false,
            seed: 0,
        }
    }

    pub fn pgd(epsilon: f64, steps: usize, seed: u64) -> Self {
        Self {
            family: AttackFamily::Pgd,
            steps,
            random_start: true,
            seed,
            ..Self::fgsm(epsilon)
        }
    }

    pub fn deepfool_linf(epsilon: f64) -> Self {
        Self {
            family: AttackFamily::DeepfoolLinf,
            steps: DEEPFOOL_MAX_ITERS,
            ..Self::fgsm(epsilon)
        }
    }

    pub fn deepfool_l2(epsilon: f64) -> Self {
        Self {
            family: AttackFamily::DeepfoolL2,
            ..Self::deepfool_linf(epsilon)
        }
    }

    /// SPSA with delta `0.01·range`, batch 128, rate `ε/10`, 100 iterations.
    pub fn spsa(epsilon: f64, range_width: f64, seed: u64) -> Self {
        Self {
            family: AttackFamily::Spsa,
            steps: 100,
            spsa_delta: 0.01 * range_width,
            random_start: false,
            seed,
            ..Self::fgsm(epsilon)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be ≥ 0, got {}",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be ≥ 1".into()));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0) {
                return Err(Error::InvalidArgument(format!("step size must be > 0, got {s}")));
            }
        }
        if self.family == AttackFamily::Spsa && (self.spsa_batch == 0 || !(self.spsa_delta > 0.0)) {
            return Err(Error::InvalidArgument("SPSA needs batch ≥ 1 and delta > 0".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.family {
            AttackFamily::Pgd => format!("pgd-{}", self.steps),
            f => f.to_string(),
        }
    }

    fn pgd_step(&self) -> f64 {
        self.step_size.unwrap_or(2.5 * self.epsilon / self.steps as f64)
    }
}

/// Oracle calls spent by an attack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Queries {
    pub gradients: usize,
    pub forwards: usize,
}

impl Queries {
    pub fn total(&self) -> usize {
        self.gradients + self.forwards
    }
}

#[derive(Clone, Debug)]
pub struct AttackResult {
    pub x_adv: Tensor,
    /// Prediction at `x_adv` differs from the true label.
    pub success: bool,
    pub queries: Queries,
    /// Logit margin at `x_adv`.
    pub margin: f64,
    /// The attack could not move (zero gradient or zero budget).
    pub degenerate: bool,
}

/// Coordinatewise feasible interval: ℓ∞ ball around `x0` intersected with the box.
struct Feasible<'a> {
    x0: &'a Tensor,
    eps: f64,
    bounds: Option<ValueRange>,
}

impl Feasible<'_> {
    fn project(&self, x: &mut Tensor) {
        for (v, &c) in x.data_mut().iter_mut().zip(self.x0.data()) {
            let (mut lo, mut hi) = (c - self.eps, c + self.eps);
            if let Some(b) = self.bounds {
                lo = lo.max(b.lo);
                hi = hi.min(b.hi);
            }
            *v = v.clamp(lo.min(hi), hi);
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Result of a signed-gradient ascent on an arbitrary input loss.
#[derive(Clone, Debug)]
pub struct Ascent {
    pub x_best: Tensor,
    pub best_loss: f64,
    pub gradients: usize,
    pub degenerate: bool,
}

/// Projected signed-gradient ascent on `loss` inside the ℓ∞ ball of radius
/// `eps` around `x0` (intersected with `bounds`). Returns the best iterate
/// among the `steps` post-update points; the start point is not a candidate.
pub fn pgd_ascent<L: InputLoss + ?Sized>(
    loss: &L,
    x0: &Tensor,
    eps: f64,
    steps: usize,
    step: f64,
    random_start: Option<u64>,
    bounds: Option<ValueRange>,
) -> Result<Ascent> {
    let feas = Feasible { x0, eps, bounds };
    let mut x = x0.clone();
    if let Some(seed) = random_start {
        if eps > 0.0 {
            let mut r = rng::rng(seed);
            for v in x.data_mut() {
                *v += r.random_range(-eps..=eps);
            }
            feas.project(&mut x);
        }
    }
    let (_, mut g) = loss.value_and_grad(&x)?;
    let mut gradients = 1;
    let mut degenerate = g.data().iter().all(|&v| v == 0.0);
    let mut best: Option<(f64, Tensor)> = None;
    for _ in 0..steps {
        x = x.zip_map(&g, |xv, gv| xv + step * sign(gv));
        feas.project(&mut x);
        let (val, g_next) = loss.value_and_grad(&x)?;
        gradients += 1;
        if best.as_ref().is_none_or(|(b, _)| val > *b) {
            best = Some((val, x.clone()));
        }
        g = g_next;
    }
    degenerate |= steps == 0;
    let (best_loss, x_best) = match best {
        Some(b) => b,
        None => (loss.value(&x)?, x),
    };
    degenerate |= eps == 0.0;
    Ok(Ascent {
        x_best,
        best_loss,
        gradients,
        degenerate,
    })
}

fn finish<M: LogitModel + ?Sized>(
    model: &M,
    x_adv: Tensor,
    y: usize,
    queries: Queries,
    degenerate: bool,
) -> Result<AttackResult> {
    let z = model.logits(&x_adv)?;
    let margin = margin_from_logits(&z, y);
    Ok(AttackResult {
        success: z.argmax() != y,
        x_adv,
        queries: Queries {
            forwards: queries.forwards + 1,
            ..queries
        },
        margin,
        degenerate,
    })
}

/// Single signed-gradient step `clip(x + ε·sign(∇ℓ(x)))`.
pub fn fgsm<M: DifferentiableModel + ?Sized>(
    model: &M,
    x: &Tensor,
    y: usize,
    eps: f64,
    bounds: Option<ValueRange>,
) -> Result<AttackResult> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be ≥ 0, got {eps}")));
    }
    let (_, g) = model.loss_grad(x, y)?;
    let degenerate = eps == 0.0 || g.data().iter().all(|&v| v == 0.0);
    let mut x_adv = x.zip_map(&g, |xv, gv| xv + eps * sign(gv));
    Feasible { x0: x, eps, bounds }.project(&mut x_adv);
    finish(
        model,
        x_adv,
        y,
        Queries {
            gradients: 1,
            forwards: 0,
        },
        degenerate,
    )
}

/// Projected gradient ascent on the cross-entropy loss; returns the
/// best-loss iterate.
pub fn pgd<M: DifferentiableModel + ?Sized>(
    model: &M,
    x: &Tensor,
    y: usize,
    spec: &AttackSpec,
    bounds: Option<ValueRange>,
) -> Result<AttackResult> {
    spec.validate()?;
    if spec.family != AttackFamily::Pgd {
        return Err(Error::InvalidArgument(format!(
            "pgd called with a {} spec",
            spec.family
        )));
    }
    let loss = LabeledLoss::new(model, y);
    let start = spec.random_start.then_some(spec.seed);
    let a = pgd_ascent(&loss, x, spec.epsilon, spec.steps, spec.pgd_step(), start, bounds)?;
    finish(
        model,
        a.x_best,
        y,
        Queries {
            gradients: a.gradients,
            forwards: 0,
        },
        a.degenerate,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeepFoolNorm {
    L2,
    Linf,
}

#[derive(Clone, Debug)]
pub struct DeepFoolResult {
    /// Accumulated perturbation before overshoot.
    pub r: Tensor,
    pub iterations: usize,
    pub queries: Queries,
}

/// Minimal-perturbation search by iterative linearization. The returned
/// `r` satisfies `argmax f(x + 1.02·r) ≠ argmax f(x)`; otherwise an error
/// carrying the partial perturbation is returned.
pub fn deepfool<M: DifferentiableModel + ?Sized>(
    model: &M,
    x: &Tensor,
    norm: DeepFoolNorm,
    max_iters: usize,
) -> Result<DeepFoolResult> {
    let k_classes = model.num_classes();
    let z0 = model.logits(x)?;
    let orig = z0.argmax();
    let mut r_tot = Tensor::zeros(x.shape());
    let mut queries = Queries {
        gradients: 0,
        forwards: 1,
    };
    let mut x_i = x.clone();
    let mut z = z0;
    for iter in 1..=max_iters {
        let mut best: Option<(f64, Tensor, f64)> = None;
        for k in 0..k_classes {
            if k == orig {
                continue;
            }
            let mut coeff = Tensor::zeros(&[k_classes]);
            coeff.data_mut()[k] = 1.0;
            coeff.data_mut()[orig] = -1.0;
            let (fk, wk) = model.logit_combination_grad(&x_i, &coeff)?;
            queries.gradients += 1;
            let denom = match norm {
                DeepFoolNorm::L2 => wk.norm2(),
                DeepFoolNorm::Linf => wk.norm1(),
            };
            if denom == 0.0 {
                continue;
            }
            let dist = fk.abs() / denom;
            if best.as_ref().is_none_or(|(d, _, _)| dist < *d) {
                best = Some((dist, wk, fk));
            }
        }
        let Some((_, w, f)) = best else {
            return Err(Error::DeepFoolNoConvergence {
                iterations: iter - 1,
                partial: r_tot,
            });
        };
        let step = match norm {
            DeepFoolNorm::L2 => w.scale(f.abs() / w.dot(&w)),
            DeepFoolNorm::Linf => w.map(sign).scale(f.abs() / w.norm1()),
        };
        r_tot.add_assign_scaled(1.0, &step);
        x_i = x.axpy(1.0 + DEEPFOOL_OVERSHOOT, &r_tot);
        z = model.logits(&x_i)?;
        queries.forwards += 1;
        if z.argmax() != orig {
            return Ok(DeepFoolResult {
                r: r_tot,
                iterations: iter,
                queries,
            });
        }
    }
    let _ = z;
    Err(Error::DeepFoolNoConvergence {
        iterations: max_iters,
        partial: r_tot,
    })
}

/// DeepFool perturbation with overshoot, scaled down onto the ℓ∞ ball of
/// radius `eps` when it exceeds the budget, then clipped to the box.
pub fn deepfool_attack<M: DifferentiableModel + ?Sized>(
    model: &M,
    x: &Tensor,
    y: usize,
    norm: DeepFoolNorm,
    eps: f64,
    bounds: Option<ValueRange>,
) -> Result<AttackResult> {
    let (r, queries) = match deepfool(model, x, norm, DEEPFOOL_MAX_ITERS) {
        Ok(res) => (res.r, res.queries),
        Err(Error::DeepFoolNoConvergence { partial, iterations }) => (
            partial,
            Queries {
                gradients: iterations * (model.num_classes() - 1),
                forwards: iterations + 1,
            },
        ),
        Err(e) => return Err(e),
    };
    let mut pert = r.scale(1.0 + DEEPFOOL_OVERSHOOT);
    let size = pert.norm_inf();
    if size > eps {
        pert = if eps == 0.0 {
            Tensor::zeros(x.shape())
        } else {
            pert.scale(eps / size)
        };
    }
    let mut x_adv = x.add(&pert);
    Feasible { x0: x, eps, bounds }.project(&mut x_adv);
    let degenerate = x_adv == *x;
    finish(model, x_adv, y, queries, degenerate)
}

/// Simultaneous-perturbation gradient estimate with `batch` Rademacher
/// probes: `mean_j (f(x + δv_j) − f(x − δv_j)) / (2δ) · v_j`.
pub fn spsa_gradient<F>(mut f: F, x: &Tensor, delta: f64, batch: usize, rng: &mut rng::Rng) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let d = x.len();
    let mut g = Tensor::zeros(x.shape());
    for _ in 0..batch {
        let v = Tensor::from_vec((0..d).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect())
            .reshape(x.shape().to_vec())?;
        let fp = f(&x.axpy(delta, &v))?;
        let fm = f(&x.axpy(-delta, &v))?;
        g.add_assign_scaled((fp - fm) / (2.0 * delta), &v);
    }
    Ok(g.scale(1.0 / batch as f64))
}

/// Gradient-free attack minimizing the logit margin with Adam steps on SPSA
/// estimates, projected onto the budget. Only forward evaluations are used.
pub fn spsa<M: LogitModel + ?Sized>(
    model: &M,
    x: &Tensor,
    y: usize,
    spec: &AttackSpec,
    bounds: Option<ValueRange>,
) -> Result<AttackResult> {
    spec.validate()?;
    let eps = spec.epsilon;
    let margin0 = margin_from_logits(&model.logits(x)?, y);
    let mut queries = Queries {
        gradients: 0,
        forwards: 1,
    };
    if eps == 0.0 {
        return finish(model, x.clone(), y, queries, true);
    }
    let feas = Feasible { x0: x, eps, bounds };
    let lr = spec.step_size.unwrap_or(eps / 10.0);
    let mut r = rng::rng(spec.seed);
    let mut adam = AdamState::new(x.len());
    let mut cur = x.clone();
    let mut best = (margin0, x.clone());
    for _ in 0..spec.steps {
        let mut f = |p: &Tensor| -> Result<f64> { Ok(margin_from_logits(&model.logits(p)?, y)) };
        let g = spsa_gradient(&mut f, &cur, spec.spsa_delta, spec.spsa_batch, &mut r)?;
        queries.forwards += 2 * spec.spsa_batch;
        let update = adam.direction(g.data());
        for (c, u) in cur.data_mut().iter_mut().zip(update) {
            *c -= lr * u;
        }
        feas.project(&mut cur);
        let m = margin_from_logits(&model.logits(&cur)?, y);
        queries.forwards += 1;
        if m < best.0 {
            best = (m, cur.clone());
        }
    }
    finish(model, best.1, y, queries, false)
}

/// `f_y(x) − max_{j≠y} f_j(x)`.
pub fn margin_loss<M: LogitModel + ?Sized>(model: &M, x: &Tensor, y: usize) -> Result<f64> {
    if y >= model.num_classes() {
        return Err(Error::InvalidLabel {
            label: y as f64,
            num_classes: model.num_classes(),
        });
    }
    Ok(margin_from_logits(&model.logits(x)?, y))
}

/// Dispatches on `spec.family`.
pub fn run_attack<M: DifferentiableModel + ?Sized>(
    model: &M,
    x: &Tensor,
    y: usize,
    spec: &AttackSpec,
    bounds: Option<ValueRange>,
) -> Result<AttackResult> {
    spec.validate()?;
    match spec.family {
        AttackFamily::Fgsm => fgsm(model, x, y, spec.epsilon, bounds),
        AttackFamily::Pgd => pgd(model, x, y, spec, bounds),
        AttackFamily::DeepfoolL2 => deepfool_attack(model, x, y, DeepFoolNorm::L2, spec.epsilon, bounds),
        AttackFamily::DeepfoolLinf => deepfool_attack(model, x, y, DeepFoolNorm::Linf, spec.epsilon, bounds),
        AttackFamily::Spsa => spsa(model, x, y, spec, bounds),
    }
}

/// Per-sample attack outcome, one CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample_id: usize,
    pub clean_correct: bool,
    pub family: String,
    pub eps: f64,
    pub success: bool,
    pub margin_clean: f64,
    pub margin_adv: f64,
    pub queries: usize,
}

/// Runs `spec` on every sample in parallel with per-sample seeds
/// `spec.seed ⊕ index`. Clean misclassifications count as successes and are
/// not attacked.
pub fn evaluate_attack<M: DifferentiableModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    spec: &AttackSpec,
) -> Result<Vec<SampleOutcome>> {
    spec.validate()?;
    (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = (&dataset.inputs[i], dataset.labels[i]);
            let z = model.logits(x)?;
            let margin_clean = margin_from_logits(&z, y);
            let clean_correct = z.argmax() == y;
            let (success, margin_adv, queries) = if !clean_correct {
                (true, margin_clean, 0)
            } else if spec.epsilon == 0.0 {
                (false, margin_clean, 0)
            } else {
                let s = spec.clone().with_seed(rng::sample_seed(spec.seed, i));
                let res = run_attack(model, x, y, &s, dataset.range)?;
                (res.success, res.margin, res.queries.total())
            };
            Ok(SampleOutcome {
                sample_id: i,
                clean_correct,
                family: spec.label(),
                eps: spec.epsilon,
                success,
                margin_clean,
                margin_adv,
                queries,
            })
        })
        .collect()
}

/// Fraction of samples still correctly classified after the attack.
pub fn adversarial_accuracy<M: DifferentiableModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    spec: &AttackSpec,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let out = evaluate_attack(model, dataset, spec)?;
    Ok(out.iter().filter(|o| !o.success).count() as f64 / out.len() as f64)
}

pub fn clean_accuracy<M: LogitModel + ?Sized>(model: &M, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let correct = (0..dataset.len())
        .into_par_iter()
        .map(|i| Ok((model.predict(&dataset.inputs[i])? == dataset.labels[i]) as usize))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Sample Pearson correlation; `NaN` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Gradient-based versus gradient-free margins on the same points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingReport {
    /// `(sample_id, pgd margin, spsa margin)`.
    pub rows: Vec<(usize, f64, f64)>,
    pub pearson: f64,
    /// Fraction of points SPSA misclassifies while PGD does not.
    pub spsa_only: f64,
}

impl MaskingReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# pearson={}\n# spsa_only={}\nsample_id,margin_pgd,margin_spsa\n",
            self.pearson, self.spsa_only
        );
        for (i, p, q) in &self.rows {
            let _ = writeln!(s, "{i},{p:e},{q:e}");
        }
        s
    }
}

/// Runs both attacks on every sample and compares the adversarial margins.
pub fn masking_check<M: DifferentiableModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    pgd_spec: &AttackSpec,
    spsa_spec: &AttackSpec,
) -> Result<MaskingReport> {
    let pgd_out = evaluate_attack(model, dataset, pgd_spec)?;
    let spsa_out = evaluate_attack(model, dataset, spsa_spec)?;
    let rows: Vec<(usize, f64, f64)> = pgd_out
        .iter()
        .zip(&spsa_out)
        .map(|(p, s)| (p.sample_id, p.margin_adv, s.margin_adv))
        .collect();
    let a: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let b: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let spsa_only = pgd_out
        .iter()
        .zip(&spsa_out)
        .filter(|(p, s)| s.success && !p.success)
        .count() as f64
        / rows.len().max(1) as f64;
    Ok(MaskingReport {
        pearson: pearson(&a, &b),
        spsa_only,
        rows,
    })
}

pub fn outcomes_to_csv(rows: &[SampleOutcome]) -> String {
    let mut s = String::from("sample_id,clean_correct,attack,eps,success,margin_clean,margin_adv,queries\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:e},{:e},{}",
            r.sample_id,
            r.clean_correct as u8,
            r.family,
            r.eps,
            r.success as u8,
            r.margin_clean,
            r.margin_adv,
            r.queries
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_network, LayerSpec, Network};

    /// Two-logit affine net with logits `(0, w·x + b)`.
    fn affine_binary(w: &[f64], b: f64) -> Network {
        let d = w.len();
        let mut net = build_network(&[LayerSpec::affine(d, 2)], 0).unwrap();
        let mut wt = vec![0.0; 2 * d];
        wt[d..].copy_from_slice(w);
        *net.param_mut("layer0.weight").unwrap() = Tensor::new(vec![2, d], wt).unwrap();
        *net.param_mut("layer0.bias").unwrap() = Tensor::from_vec(vec![0.0, b]);
        net
    }

    #[test]
    fn fgsm_follows_weight_sign() {
        let net = affine_binary(&[3.0, -2.0], 0.0);
        let x = Tensor::from_vec(vec![-1.0, 0.5]);
        let res = fgsm(&net, &x, 0, 0.1, None).unwrap();
        let d = res.x_adv.sub(&x);
        assert!((d.data()[0] - 0.1).abs() < 1e-15);
        assert!((d.data()[1] + 0.1).abs() < 1e-15);
        let res = fgsm(&net, &x, 0, 0.0, None).unwrap();
        assert_eq!(res.x_adv, x);
        assert!(res.degenerate);
    }

    #[test]
    fn pgd_one_step_equals_fgsm() {
        let net = affine_binary(&[1.5, -0.5, 2.0], 0.3);
        let x = Tensor::from_vec(vec![0.2, -0.4, 0.1]);
        let spec = AttackSpec {
            step_size: Some(0.25),
            random_start: false,
            ..AttackSpec::pgd(0.25, 1, 0)
        };
        let a = pgd(&net, &x, 0, &spec, None).unwrap();
        let b = fgsm(&net, &x, 0, 0.25, None).unwrap();
        assert_eq!(a.x_adv, b.x_adv);
    }

    #[test]
    fn margin_examples() {
        let net = affine_binary(&[0.0], 3.0);
        let x = Tensor::from_vec(vec![1.0]);
        // logits (0, 3)
        assert_eq!(margin_loss(&net, &x, 0).unwrap(), -3.0);
        assert_eq!(margin_loss(&net, &x, 1).unwrap(), 3.0);
        assert!(margin_loss(&net, &x, 2).is_err());
    }

    #[test]
    fn deepfool_affine_closed_forms() {
        let w = [2.0, -1.0, 0.5];
        let b = -0.7;
        let net = affine_binary(&w, b);
        let x = Tensor::from_vec(vec![0.1, 0.3, -0.2]);
        let f = w.iter().zip(x.data()).map(|(a, c)| a * c).sum::<f64>() + b;
        assert!(f < 0.0);
        let wn2: f64 = w.iter().map(|v| v * v).sum();
        let res = deepfool(&net, &x, DeepFoolNorm::L2, 50).unwrap();
        assert_eq!(res.iterations, 1);
        for (ri, wi) in res.r.data().iter().zip(w) {
            assert!((ri - (-f * wi / wn2)).abs() < 1e-12);
        }
        let wn1: f64 = w.iter().map(|v| v.abs()).sum();
        let res = deepfool(&net, &x, DeepFoolNorm::Linf, 50).unwrap();
        assert_eq!(res.iterations, 1);
        for (ri, wi) in res.r.data().iter().zip(w) {
            assert!((ri - (-f * wi.signum() / wn1)).abs() < 1e-12);
        }
    }

    #[test]
    fn deepfool_constant_model_errors() {
        let net = affine_binary(&[0.0, 0.0], 1.0);
        let x = Tensor::from_vec(vec![0.0, 0.0]);
        assert!(matches!(
            deepfool(&net, &x, DeepFoolNorm::L2, 10),
            Err(Error::DeepFoolNoConvergence { .. })
        ));
    }

    #[test]
    fn spsa_zero_budget_is_identity() {
        let net = affine_binary(&[1.0, 1.0], 0.0);
        let x = Tensor::from_vec(vec![-0.5, -0.5]);
        let spec = AttackSpec::spsa(0.0, 1.0, 3);
        let res = spsa(&net, &x, 0, &spec, None).unwrap();
        assert_eq!(res.x_adv, x);
    }

    #[test]
    fn box_and_budget_respected() {
        let net = affine_binary(&[5.0, -5.0], 0.0);
        let x = Tensor::from_vec(vec![254.0, 1.0]);
        let bounds = Some(ValueRange::PIXELS);
        for spec in [
            AttackSpec::fgsm(4.0),
            AttackSpec::pgd(4.0, 10, 2),
            AttackSpec::deepfool_linf(4.0),
            AttackSpec::spsa(4.0, 255.0, 1),
        ] {
            let res = run_attack(&net, &x, 0, &spec, bounds).unwrap();
            assert!(res.x_adv.sub(&x).norm_inf() <= 4.0 + 1e-9, "{}", spec.label());
            assert!(res.x_adv.data().iter().all(|&v| (0.0..=255.0).contains(&v)));
        }
    }

    #[test]
    fn csv_header() {
        let s = outcomes_to_csv(&[]);
        assert_eq!(
            s.trim(),
            "sample_id,clean_correct,attack,eps,success,margin_clean,margin_adv,queries"
        );
    }
}
