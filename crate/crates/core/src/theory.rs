//! Minimal ℓ₂ perturbations under a local quadratic model of the loss and
//! the curvature-dependent bounds on their size.
//!
//! The model is `q(r) = −c + gᵀr + ½ rᵀHr` with `c = t − ℓ(x) ≥ 0`; a
//! perturbation reaches the loss threshold `t` when `q(r) ≥ 0`.

use std::fmt::Write as _;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{jacobi_eigen, random_orthogonal, Matrix, SymmetricEigen};
use crate::rng;

/// Eigen-solver tolerance used for the model Hessian.
const EIG_TOL: f64 = 1e-14;
const SYMMETRY_TOL: f64 = 1e-12;

/// Violations smaller than this are attributed to rounding.
pub const SANDWICH_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticModel {
    g: Vec<f64>,
    h: Matrix,
    c: f64,
}

/// Serializable form of a model, used for counterexample dumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDump {
    pub g: Vec<f64>,
    pub h: Vec<Vec<f64>>,
    pub c: f64,
}

impl QuadraticModel {
    pub fn new(g: Vec<f64>, h: Matrix, c: f64) -> Result<Self> {
        if g.len() != h.n() {
            return Err(Error::ShapeMismatch {
                op: "quadratic model",
                detail: format!("gradient has {} entries, Hessian is {}×{}", g.len(), h.n(), h.n()),
            });
        }
        if h.max_asymmetry() > SYMMETRY_TOL {
            return Err(Error::InvalidArgument(format!(
                "Hessian is not symmetric (max asymmetry {:e})",
                h.max_asymmetry()
            )));
        }
        if !(c >= 0.0) {
            return Err(Error::InvalidArgument(format!("c must be ≥ 0, got {c}")));
        }
        if g.iter().chain(h.data()).any(|v| !v.is_finite()) || !c.is_finite() {
            return Err(Error::Poisoned("quadratic model".into()));
        }
        Ok(Self { g, h, c })
    }

    pub fn g(&self) -> &[f64] {
        &self.g
    }

    pub fn hessian(&self) -> &Matrix {
        &self.h
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    /// `q(r) = −c + gᵀr + ½ rᵀHr`.
    pub fn constraint(&self, r: &[f64]) -> f64 {
        let hr = self.h.mul_vec(r);
        -self.c + dot(&self.g, r) + 0.5 * dot(r, &hr)
    }

    pub fn eigen(&self) -> Result<SymmetricEigen> {
        jacobi_eigen(&self.h, EIG_TOL, 200)
    }

    pub fn dump(&self) -> ModelDump {
        let n = self.dim();
        ModelDump {
            g: self.g.clone(),
            h: (0..n).map(|i| self.h.row(i).to_vec()).collect(),
            c: self.c,
        }
    }

    pub fn from_dump(d: &ModelDump) -> Result<Self> {
        if d.h.iter().any(|row| row.len() != d.h.len()) {
            return Err(Error::InvalidArgument("Hessian rows must be square".into()));
        }
        Self::new(d.g.clone(), Matrix::from_rows(&d.h), d.c)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Global minimizer of `‖r‖` subject to `q(r) ≥ 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct MinPerturbation {
    pub r: Vec<f64>,
    pub norm: f64,
    /// Lagrange multiplier `μ` with `r = μ(I − μH)⁻¹g` (pseudo-inverse in
    /// the hard case).
    pub multiplier: f64,
    /// The gradient has no component in the top eigenspace and the
    /// minimizer needed an added top-eigenvector component.
    pub hard_case: bool,
}

/// Solves `min ‖r‖ s.t. −c + gᵀr + ½rᵀHr ≥ 0` exactly.
///
/// In the eigenbasis of `H` the stationary points are
/// `r̂ᵢ = μ ĝᵢ / (1 − μλᵢ)`, and global optimality requires `I − μH ⪰ 0`,
/// i.e. `μ ∈ [0, 1/ν]` for `ν = λ_max > 0`. On that interval
/// `φ(μ) = q(r(μ)) = −c + Σ ĝᵢ² μ(1 − ½μλᵢ)/(1 − μλᵢ)²` has derivative
/// `Σ ĝᵢ²/(1 − μλᵢ)³ > 0`, so its root is found by bisection.
pub fn exact_min_perturbation(m: &QuadraticModel) -> Result<MinPerturbation> {
    let d = m.dim();
    if m.c == 0.0 {
        return Ok(MinPerturbation {
            r: vec![0.0; d],
            norm: 0.0,
            multiplier: 0.0,
            hard_case: false,
        });
    }
    let eig = m.eigen()?;
    let lam = &eig.values;
    let nu = lam[d - 1];
    let gh: Vec<f64> = (0..d).map(|k| dot(&eig.vector(k), &m.g)).collect();
    let gnorm = norm(&gh);
    let hscale = lam.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    let lam_tol = 1e-12 * hscale.max(1.0);
    let g_tol = 1e-13 * gnorm.max(1e-300);

    let phi = |mu: f64| -> f64 {
        let mut s = -m.c;
        for (&l, &gi) in lam.iter().zip(&gh) {
            let u = 1.0 - mu * l;
            s += gi * gi * mu * (1.0 - 0.5 * mu * l) / (u * u);
        }
        s
    };
    let r_of = |mu: f64, skip_top: bool| -> Vec<f64> {
        (0..d)
            .map(|k| {
                if skip_top && lam[k] >= nu - lam_tol {
                    0.0
                } else {
                    mu * gh[k] / (1.0 - mu * lam[k])
                }
            })
            .collect()
    };
    let to_original = |rh: &[f64]| -> Vec<f64> {
        let mut r = vec![0.0; d];
        for (k, &c) in rh.iter().enumerate() {
            for (ri, vi) in r.iter_mut().zip(eig.vector(k)) {
                *ri += c * vi;
            }
        }
        r
    };

    let (lo, hi) = if nu > lam_tol {
        let mu_max = 1.0 / nu;
        let top_mass: f64 = (0..d).filter(|&k| lam[k] >= nu - lam_tol).map(|k| gh[k] * gh[k]).sum();
        if top_mass.sqrt() <= g_tol {
            // φ stays finite up to 1/ν
            let rest: f64 = (0..d)
                .filter(|&k| lam[k] < nu - lam_tol)
                .map(|k| {
                    let u = 1.0 - mu_max * lam[k];
                    gh[k] * gh[k] * mu_max * (1.0 - 0.5 * mu_max * lam[k]) / (u * u)
                })
                .sum();
            let q0 = rest - m.c;
            if q0 <= 0.0 {
                let mut rh = r_of(mu_max, true);
                let top = (0..d).rev().find(|&k| lam[k] >= nu - lam_tol).expect("top index");
                rh[top] = (-2.0 * q0 / nu).sqrt();
                let r = to_original(&rh);
                return Ok(MinPerturbation {
                    norm: norm(&rh),
                    r,
                    multiplier: mu_max,
                    hard_case: true,
                });
            }
        }
        (0.0, mu_max)
    } else {
        // H ⪯ 0: φ is bounded iff g has no mass on zero eigenvalues
        let flat_mass: f64 = (0..d).filter(|&k| lam[k].abs() <= lam_tol).map(|k| gh[k] * gh[k]).sum();
        if flat_mass.sqrt() <= g_tol {
            let sup: f64 = (0..d)
                .filter(|&k| lam[k] < -lam_tol)
                .map(|k| gh[k] * gh[k] / (-2.0 * lam[k]))
                .sum::<f64>()
                - m.c;
            if sup < 0.0 {
                return Err(Error::Infeasible(format!(
                    "concave model never reaches the threshold (sup q = {sup:e})"
                )));
            }
        }
        let mut hi = 1.0 / gnorm.max(1e-300);
        let mut tries = 0;
        while phi(hi) < 0.0 {
            hi *= 2.0;
            tries += 1;
            if tries > 2000 || !hi.is_finite() {
                return Err(Error::Infeasible("threshold not reachable".into()));
            }
        }
        (0.0, hi)
    };

    let (mut lo, mut hi) = (lo, hi);
    // bisection to adjacent floats; `hi` may be the pole 1/ν, never evaluated
    for _ in 0..2100 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if phi(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mu = if nu > lam_tol && hi >= 1.0 / nu { lo } else { hi };
    let rh = r_of(mu, false);
    let r = to_original(&rh);
    Ok(MinPerturbation {
        norm: norm(&rh),
        r,
        multiplier: mu,
        hard_case: false,
    })
}

/// Minimum over unit directions `w` of the smallest `α ≥ 0` with
/// `q(αw) ≥ 0`. Directions are an even angular grid for `d = 2` and a
/// Fibonacci lattice on the sphere for `d = 3`.
pub fn direction_scan_min(m: &QuadraticModel, directions: usize) -> Result<f64> {
    let d = m.dim();
    if !(2..=3).contains(&d) {
        return Err(Error::InvalidArgument(format!(
            "direction scan supports d ∈ {{2, 3}}, got {d}"
        )));
    }
    if m.c == 0.0 {
        return Ok(0.0);
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let best = (0..directions)
        .into_par_iter()
        .map(|k| {
            let w = if d == 2 {
                let t = 2.0 * std::f64::consts::PI * k as f64 / directions as f64;
                vec![t.cos(), t.sin()]
            } else {
                let z = 1.0 - 2.0 * (k as f64 + 0.5) / directions as f64;
                let rad = (1.0 - z * z).sqrt();
                let t = golden * k as f64;
                vec![rad * t.cos(), rad * t.sin(), z]
            };
            min_step_along(m, &w).unwrap_or(f64::INFINITY)
        })
        .reduce(|| f64::INFINITY, f64::min);
    if best.is_finite() {
        Ok(best)
    } else {
        Err(Error::Infeasible("no scanned direction reaches the threshold".into()))
    }
}

/// Smallest `α ≥ 0` with `−c + α gᵀw + ½α² wᵀHw ≥ 0`, if any.
pub fn min_step_along(m: &QuadraticModel, w: &[f64]) -> Option<f64> {
    let b = dot(&m.g, w);
    let kappa = dot(w, &m.h.mul_vec(w));
    min_root(b, kappa, m.c)
}

/// Smallest non-negative `α` with `½κα² + bα − c ≥ 0` for `c ≥ 0`.
fn min_root(b: f64, kappa: f64, c: f64) -> Option<f64> {
    if c == 0.0 {
        return Some(0.0);
    }
    let disc = b * b + 2.0 * kappa * c;
    if disc < 0.0 {
        return None;
    }
    let den = b + disc.sqrt();
    (den > 0.0).then(|| 2.0 * c / den)
}

/// Lower bound `(‖g‖/ν)(√(1 + 2νc/‖g‖²) − 1)` in cancellation-free form.
pub fn lower_bound(gnorm: f64, c: f64, nu: f64) -> f64 {
    if c == 0.0 {
        return 0.0;
    }
    2.0 * c / (gnorm + (gnorm * gnorm + 2.0 * nu * c).sqrt())
}

/// Upper bound `(|gᵀu|/ν)(√(1 + 2νc/(gᵀu)²) − 1)`; equals `√(2c/ν)` when
/// `gᵀu = 0` and `c/|gᵀu|` when `ν = 0`.
pub fn upper_bound(gtu: f64, c: f64, nu: f64) -> f64 {
    if c == 0.0 {
        return 0.0;
    }
    let a = gtu.abs();
    2.0 * c / (a + (a * a + 2.0 * nu * c).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
    pub lower_simplified: f64,
    pub upper_simplified: f64,
    /// `gᵀu = 0`: `upper` is the limit value `√(2c/ν)`.
    pub upper_limit: bool,
    pub nu: f64,
    pub gnorm: f64,
    pub gtu: f64,
}

/// Curvature bounds on `‖r*‖` for `ν = λ_max(H) ≥ 0` and `u` its unit
/// eigenvector.
pub fn robustness_bounds(m: &QuadraticModel) -> Result<Bounds> {
    let eig = m.eigen()?;
    let d = m.dim();
    let nu = eig.values[d - 1];
    if nu < 0.0 {
        return Err(Error::InvalidArgument(format!("bounds need λ_max ≥ 0, got {nu:e}")));
    }
    let u = eig.vector(d - 1);
    let gnorm = norm(&m.g);
    let gtu = dot(&m.g, &u);
    let c = m.c;
    let (lower_simplified, upper_simplified) = if c == 0.0 {
        (0.0, 0.0)
    } else {
        (
            if gnorm == 0.0 {
                f64::NEG_INFINITY
            } else {
                c / gnorm - 2.0 * nu * c * c / gnorm.powi(3)
            },
            if gtu == 0.0 { f64::INFINITY } else { c / gtu.abs() },
        )
    };
    Ok(Bounds {
        lower: lower_bound(gnorm, c, nu),
        upper: upper_bound(gtu, c, nu),
        lower_simplified,
        upper_simplified,
        upper_limit: gtu == 0.0 && c > 0.0,
        nu,
        gnorm,
        gtu,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub nu: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Both bounds on a curvature grid for fixed `‖g‖`, `c` and `gᵀu`.
pub fn bound_curve(gnorm: f64, c: f64, gtu: f64, nus: &[f64]) -> Result<Vec<BoundRow>> {
    if nus.iter().any(|&v| !(v > 0.0)) || nus.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(
            "ν grid must be positive and strictly ascending".into(),
        ));
    }
    Ok(nus
        .iter()
        .map(|&nu| BoundRow {
            nu,
            lower: lower_bound(gnorm, c, nu),
            upper: upper_bound(gtu, c, nu),
        })
        .collect())
}

/// `n` log-spaced points from `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

pub fn bound_curve_csv(gnorm: f64, c: f64, gtu: f64, rows: &[BoundRow]) -> String {
    let mut s = format!("# gnorm={gnorm}\n# c={c}\n# gtu={gtu}\nnu,lower,upper\n");
    for r in rows {
        let _ = writeln!(s, "{:e},{:e},{:e}", r.nu, r.lower, r.upper);
    }
    s
}

/// The five quantities and the four inequalities
/// `lower_s ≤ lower ≤ ‖r*‖ ≤ upper ≤ upper_s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub lower_simplified: f64,
    pub lower: f64,
    pub exact: f64,
    pub upper: f64,
    pub upper_simplified: f64,
    pub simplified_lower_ok: bool,
    pub lower_ok: bool,
    pub upper_ok: bool,
    pub simplified_upper_ok: bool,
    pub hard_case: bool,
}

impl SandwichReport {
    pub fn passed(&self) -> bool {
        self.simplified_lower_ok && self.lower_ok && self.upper_ok && self.simplified_upper_ok
    }
}

pub fn sandwich_check(m: &QuadraticModel) -> Result<SandwichReport> {
    let b = robustness_bounds(m)?;
    if b.nu <= 0.0 {
        return Err(Error::InvalidArgument("sandwich check needs λ_max > 0".into()));
    }
    let exact = exact_min_perturbation(m)?;
    let le = |a: f64, b: f64| a <= b + SANDWICH_TOL;
    Ok(SandwichReport {
        simplified_lower_ok: le(b.lower_simplified, b.lower),
        lower_ok: le(b.lower, exact.norm),
        upper_ok: le(exact.norm, b.upper),
        simplified_upper_ok: le(b.upper, b.upper_simplified),
        lower_simplified: b.lower_simplified,
        lower: b.lower,
        exact: exact.norm,
        upper: b.upper,
        upper_simplified: b.upper_simplified,
        hard_case: exact.hard_case,
    })
}

/// Ranges for [`random_model`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRanges {
    pub dims: (usize, usize),
    pub eigenvalues: (f64, f64),
    pub min_top_eigenvalue: f64,
    pub gnorm: (f64, f64),
    pub c: (f64, f64),
}

impl Default for ModelRanges {
    fn default() -> Self {
        Self {
            dims: (2, 8),
            eigenvalues: (-2.0, 5.0),
            min_top_eigenvalue: 0.01,
            gnorm: (0.1, 3.0),
            c: (0.01, 2.0),
        }
    }
}

/// Draws a model from a stream seeded by `seed`, in this order: `d`
/// uniform on `dims`; a Haar-like orthogonal `Q`; `d` eigenvalues uniform
/// on `eigenvalues` (if the largest falls below `min_top_eigenvalue` it is
/// redrawn uniform on `[min_top_eigenvalue, eigenvalues.1]`); a Gaussian
/// gradient direction; `‖g‖` and `c` uniform on their ranges.
/// `H = Q diag(λ) Qᵀ`, symmetrized.
pub fn random_model(seed: u64, ranges: &ModelRanges) -> Result<QuadraticModel> {
    let mut r = rng::rng(seed);
    let d = r.random_range(ranges.dims.0..=ranges.dims.1);
    let q = random_orthogonal(d, &mut r);
    let mut lam: Vec<f64> = (0..d)
        .map(|_| r.random_range(ranges.eigenvalues.0..ranges.eigenvalues.1))
        .collect();
    let (imax, &lmax) = lam.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).expect("d ≥ 1");
    if lmax < ranges.min_top_eigenvalue {
        lam[imax] = r.random_range(ranges.min_top_eigenvalue..ranges.eigenvalues.1);
    }
    let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
    let dn = norm(&dir);
    let gnorm = r.random_range(ranges.gnorm.0..ranges.gnorm.1);
    let c = r.random_range(ranges.c.0..ranges.c.1);
    let h = q.mul(&Matrix::diag(&lam)).mul(&q.transpose()).symmetrized();
    QuadraticModel::new(dir.iter().map(|v| v * gnorm / dn).collect(), h, c)
}

/// As [`random_model`] but with `g` along the top eigenvector (either sign).
pub fn random_collinear_model(seed: u64, ranges: &ModelRanges) -> Result<QuadraticModel> {
    let m = random_model(seed, ranges)?;
    let eig = m.eigen()?;
    let u = eig.vector(m.dim() - 1);
    let s = if seed.is_multiple_of(2) { 1.0 } else { -1.0 } * norm(&m.g);
    QuadraticModel::new(u.iter().map(|v| s * v).collect(), m.h.clone(), m.c)
}

/// One failing model with its report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub index: usize,
    pub seed: u64,
    pub model: ModelDump,
    pub report: SandwichReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub models: usize,
    pub hard_cases: usize,
    pub rows: Vec<(usize, usize, SandwichReport)>,
    pub counterexamples: Vec<Counterexample>,
}

/// Sandwich check on `n` models; model `i` uses seed `master ⊕ i`.
pub fn sandwich_sweep(n: usize, master: u64, ranges: &ModelRanges, collinear: bool) -> Result<SweepSummary> {
    let rows = (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = rng::sample_seed(master, i);
            let m = if collinear {
                random_collinear_model(seed, ranges)?
            } else {
                random_model(seed, ranges)?
            };
            let rep = sandwich_check(&m)?;
            Ok((i, seed, m, rep))
        })
        .collect::<Result<Vec<_>>>()?;
    let hard_cases = rows.iter().filter(|r| r.3.hard_case).count();
    let counterexamples = rows
        .iter()
        .filter(|r| !r.3.passed())
        .map(|(i, seed, m, rep)| Counterexample {
            index: *i,
            seed: *seed,
            model: m.dump(),
            report: rep.clone(),
        })
        .collect();
    Ok(SweepSummary {
        models: n,
        hard_cases,
        rows: rows.into_iter().map(|(i, _, m, rep)| (i, m.dim(), rep)).collect(),
        counterexamples,
    })
}

impl SweepSummary {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,dim,lower_simplified,lower,exact,upper,upper_simplified,passed\n");
        for (i, d, r) in &self.rows {
            let _ = writeln!(
                s,
                "{i},{d},{:e},{:e},{:e},{:e},{:e},{}",
                r.lower_simplified,
                r.lower,
                r.exact,
                r.upper,
                r.upper_simplified,
                r.passed() as u8
            );
        }
        s
    }

    pub fn counterexamples_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.counterexamples)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(g: &[f64], h: &[f64], c: f64) -> QuadraticModel {
        QuadraticModel::new(g.to_vec(), Matrix::diag(h), c).unwrap()
    }

    #[test]
    fn golden_ratio_example() {
        let m = model(&[1.0, 0.0], &[2.0, 0.0], 1.0);
        let s = exact_min_perturbation(&m).unwrap();
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        assert!((s.norm - phi).abs() < 1e-12);
        assert!((s.r[0] - phi).abs() < 1e-12 && s.r[1].abs() < 1e-12);
        let b = robustness_bounds(&m).unwrap();
        assert!((b.lower - phi).abs() < 1e-15 && (b.upper - phi).abs() < 1e-15);
    }

    #[test]
    fn curvature_off_gradient_axis() {
        let m = model(&[1.0, 0.0], &[0.0, 2.0], 1.0);
        let s = exact_min_perturbation(&m).unwrap();
        assert!(s.hard_case);
        assert!((s.norm - 3f64.sqrt() / 2.0).abs() < 1e-12);
        assert!((s.r[0] - 0.5).abs() < 1e-12);
        assert!((s.r[1].abs() - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn linear_and_threshold_cases() {
        let m = model(&[3.0, 4.0], &[0.0, 0.0], 2.0);
        let s = exact_min_perturbation(&m).unwrap();
        assert!((s.norm - 0.4).abs() < 1e-12);
        let m = model(&[3.0, 4.0], &[1.0, 2.0], 0.0);
        assert_eq!(exact_min_perturbation(&m).unwrap().norm, 0.0);
        let b = robustness_bounds(&m).unwrap();
        assert_eq!((b.lower, b.upper), (0.0, 0.0));
    }

    #[test]
    fn infeasible_concave_model() {
        let m = model(&[0.0, 0.0], &[-1.0, -2.0], 1.0);
        assert!(matches!(exact_min_perturbation(&m), Err(Error::Infeasible(_))));
        let m = model(&[1.0, 0.0], &[-1.0, -2.0], 0.25);
        // sup q = 1/2 − 1/4 > 0: reachable
        let s = exact_min_perturbation(&m).unwrap();
        assert!(m.constraint(&s.r).abs() < 1e-9);
    }

    #[test]
    fn reference_curve_points() {
        assert!((lower_bound(1.0, 1.0, 1.0) - (3f64.sqrt() - 1.0)).abs() < 1e-15);
        assert!((upper_bound(0.5, 1.0, 1.0) - 1.0).abs() < 1e-15);
        assert!((lower_bound(1.0, 1.0, 1e-9) - 1.0).abs() < 1e-8);
        assert!((upper_bound(0.0, 2.0, 4.0) - 1.0).abs() < 1e-15);
        assert!(bound_curve(1.0, 1.0, 0.5, &[1.0, 0.5]).is_err());
    }

    #[test]
    fn scan_agrees_with_solver() {
        for seed in 0..20 {
            let ranges = ModelRanges {
                dims: (2, 3),
                ..ModelRanges::default()
            };
            let m = random_model(seed, &ranges).unwrap();
            let exact = exact_min_perturbation(&m).unwrap().norm;
            let scan = direction_scan_min(&m, 20_000).unwrap();
            assert!(scan >= exact - 1e-9, "seed {seed}: {scan} < {exact}");
            assert!(scan - exact < 2e-2 * exact.max(1.0), "seed {seed}: {scan} vs {exact}");
        }
    }

    #[test]
    fn dump_round_trip() {
        let m = random_model(11, &ModelRanges::default()).unwrap();
        let back = QuadraticModel::from_dump(&m.dump()).unwrap();
        assert_eq!(back, m);
    }
}
