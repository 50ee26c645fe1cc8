//! Input-space curvature probes built on finite-difference Hessian-vector
//! products `Hz ≈ (∇ℓ(x + hz) − ∇ℓ(x)) / h`.

use std::fmt::Write as _;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, JACOBI_MAX_SWEEPS, JACOBI_TOL};
use crate::objective::{DifferentiableModel, InputLoss, LabeledLoss};
use crate::rng;
use crate::tensor::Tensor;

/// Largest input dimension for which the full Hessian is assembled.
pub const MAX_FULL_DIM: usize = 1024;

const UNIT_TOL: f64 = 1e-8;

/// How a profile's eigenvalues were obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Full,
    /// `k` smallest and `k` largest Ritz values.
    Lanczos {
        k: usize,
    },
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Estimator::Full => write!(f, "full"),
            Estimator::Lanczos { k } => write!(f, "lanczos-{k}"),
        }
    }
}

/// Sorted (ascending, signed) eigenvalues of the input Hessian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureProfile {
    pub eigenvalues: Vec<f64>,
    pub h: f64,
    pub sample_id: Option<usize>,
    pub estimator: Estimator,
    pub samples: usize,
    pub seed: Option<u64>,
}

impl CurvatureProfile {
    pub fn max_abs(&self) -> f64 {
        self.eigenvalues.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `rank,eigenvalue` rows behind `#` metadata lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# h={}", self.h);
        let _ = writeln!(s, "# samples={}", self.samples);
        let _ = writeln!(s, "# estimator={}", self.estimator);
        match self.seed {
            Some(seed) => {
                let _ = writeln!(s, "# seed={seed}");
            }
            None => {
                let _ = writeln!(s, "# seed=none");
            }
        }
        s.push_str("rank,eigenvalue\n");
        for (i, v) in self.eigenvalues.iter().enumerate() {
            let _ = writeln!(s, "{i},{v:e}");
        }
        s
    }
}

fn check_h(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "finite-difference scale h must be > 0, got {h}"
        )))
    }
}

/// `(∇ℓ(x + hz) − ∇ℓ(x)) / h` for a unit-norm direction `z`.
pub fn hvp<L: InputLoss + ?Sized>(loss: &L, x: &Tensor, z: &Tensor, h: f64) -> Result<Tensor> {
    let base = loss.grad(x)?;
    hvp_with_base(loss, x, &base, z, h)
}

/// As [`hvp`], reusing a precomputed `∇ℓ(x)`.
pub fn hvp_with_base<L: InputLoss + ?Sized>(
    loss: &L,
    x: &Tensor,
    base_grad: &Tensor,
    z: &Tensor,
    h: f64,
) -> Result<Tensor> {
    check_h(h)?;
    let n = z.norm2();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::InvalidArgument(format!(
            "HVP direction must have unit norm, got ‖z‖ = {n}"
        )));
    }
    let shifted = loss.grad(&x.axpy(h, z))?;
    let out = shifted.sub(base_grad).scale(1.0 / h);
    out.ensure_finite("Hessian-vector product")?;
    Ok(out)
}

/// HVP along an arbitrary non-zero direction via `H z = ‖z‖ · H (z/‖z‖)`.
pub fn hvp_any<L: InputLoss + ?Sized>(loss: &L, x: &Tensor, base_grad: &Tensor, z: &Tensor, h: f64) -> Result<Tensor> {
    let n = z.norm2();
    if n == 0.0 {
        return Err(Error::InvalidArgument("HVP direction is zero".into()));
    }
    Ok(hvp_with_base(loss, x, base_grad, &z.scale(1.0 / n), h)?.scale(n))
}

/// Finite-difference Hessian assembled column by column (not symmetrized).
pub fn hessian_matrix<L: InputLoss + ?Sized>(loss: &L, x: &Tensor, h: f64) -> Result<Matrix> {
    check_h(h)?;
    let d = x.len();
    let base = loss.grad(x)?;
    let cols = (0..d)
        .into_par_iter()
        .map(|i| hvp_with_base(loss, x, &base, &Tensor::basis(d, i), h))
        .collect::<Result<Vec<_>>>()?;
    let mut m = Matrix::zeros(d);
    for (j, c) in cols.iter().enumerate() {
        m.set_column(j, c.data());
    }
    Ok(m)
}

/// Eigenvalues of the symmetrized finite-difference Hessian at `x`.
pub fn curvature_profile<L: InputLoss + ?Sized>(
    loss: &L,
    x: &Tensor,
    h: f64,
    estimator: Estimator,
) -> Result<CurvatureProfile> {
    let d = x.len();
    let eigenvalues = match estimator {
        Estimator::Full => {
            if d > MAX_FULL_DIM {
                return Err(Error::InvalidArgument(format!(
                    "full profile limited to d ≤ {MAX_FULL_DIM}, got {d}; request a Lanczos estimate"
                )));
            }
            let hm = hessian_matrix(loss, x, h)?.symmetrized();
            linalg::jacobi_eigen(&hm, JACOBI_TOL, JACOBI_MAX_SWEEPS)?.values
        }
        Estimator::Lanczos { k } => {
            let (values, _) = lanczos_extremes(loss, x, h, k)?;
            values
        }
    };
    Ok(CurvatureProfile {
        eigenvalues,
        h,
        sample_id: None,
        estimator,
        samples: 1,
        seed: None,
    })
}

/// `k` smallest and `k` largest Ritz pairs of the HVP operator, ascending.
fn lanczos_extremes<L: InputLoss + ?Sized>(
    loss: &L,
    x: &Tensor,
    h: f64,
    k: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    check_h(h)?;
    if k == 0 {
        return Err(Error::InvalidArgument("Lanczos needs k ≥ 1".into()));
    }
    let d = x.len();
    let base = loss.grad(x)?;
    // deterministic start vector with no special alignment
    let start: Vec<f64> = (0..d)
        .map(|i| 1.0 + 0.5 * ((i as f64) * 0.7548776662).fract())
        .collect();
    let res = linalg::lanczos(
        d,
        |v| {
            let z = Tensor::from_slice(v);
            Ok(hvp_any(loss, x, &base, &z, h)?.into_data())
        },
        k,
        &start,
        1e-10,
    )?;
    let m = res.values.len();
    let idx: Vec<usize> = if 2 * k >= m {
        (0..m).collect()
    } else {
        (0..k).chain(m - k..m).collect()
    };
    Ok((
        idx.iter().map(|&i| res.values[i]).collect(),
        idx.iter().map(|&i| res.vectors[i].clone()).collect(),
    ))
}

/// Largest eigenvalue of the symmetrized Hessian with its unit eigenvector.
pub fn top_eigenpair<L: InputLoss + ?Sized>(loss: &L, x: &Tensor, h: f64) -> Result<(f64, Tensor)> {
    let d = x.len();
    if d <= MAX_FULL_DIM {
        let hm = hessian_matrix(loss, x, h)?.symmetrized();
        let eig = linalg::jacobi_eigen(&hm, JACOBI_TOL, JACOBI_MAX_SWEEPS)?;
        Ok((eig.values[d - 1], Tensor::from_vec(eig.vector(d - 1))))
    } else {
        let (values, vectors) = lanczos_extremes(loss, x, h, 1)?;
        let last = values.len() - 1;
        let u = Tensor::from_vec(vectors[last].clone());
        let n = u.norm2();
        Ok((values[last], u.scale(1.0 / n)))
    }
}

/// Hutchinson estimate `sqrt(mean_i ‖H z_i‖²)` with raw `z_i ~ N(0, I)`.
pub fn frobenius_estimate<L: InputLoss + ?Sized>(
    loss: &L,
    x: &Tensor,
    h: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be ≥ 1".into()));
    }
    check_h(h)?;
    let d = x.len();
    let base = loss.grad(x)?;
    let mut r = rng::rng(seed);
    let mut total = 0.0;
    for _ in 0..n_samples {
        let z = Tensor::from_vec((0..d).map(|_| StandardNormal.sample(&mut r)).collect());
        if z.norm2() == 0.0 {
            continue;
        }
        let hz = hvp_any(loss, x, &base, &z, h)?;
        total += hz.dot(&hz);
    }
    Ok((total / n_samples as f64).sqrt())
}

/// `|∇ℓ(x)ᵀ u| / ‖∇ℓ(x)‖` for the top Hessian eigenvector `u`.
pub fn alignment<L: InputLoss + ?Sized>(loss: &L, x: &Tensor, h: f64) -> Result<f64> {
    let g = loss.grad(x)?;
    let gn = g.norm2();
    if gn == 0.0 {
        return Err(Error::ZeroGradient("alignment undefined at a zero gradient"));
    }
    let (_, u) = top_eigenpair(loss, x, h)?;
    Ok(normalized_inner_product(&g, &u))
}

/// `|aᵀb| / (‖a‖‖b‖)`, clamped to `[0, 1]`.
pub fn normalized_inner_product(a: &Tensor, b: &Tensor) -> f64 {
    (a.dot(b).abs() / (a.norm2() * b.norm2())).clamp(0.0, 1.0)
}

/// Rank-wise mean of signed sorted eigenvalues.
pub fn mean_profile(profiles: &[CurvatureProfile]) -> Result<CurvatureProfile> {
    let first = profiles
        .first()
        .ok_or_else(|| Error::InvalidArgument("no profiles to average".into()))?;
    let n = first.eigenvalues.len();
    if profiles.iter().any(|p| p.eigenvalues.len() != n) {
        return Err(Error::InvalidArgument("profiles have different lengths".into()));
    }
    let mut sums = vec![0.0; n];
    for p in profiles {
        for (s, v) in sums.iter_mut().zip(&p.eigenvalues) {
            *s += v;
        }
    }
    let count = profiles.len() as f64;
    Ok(CurvatureProfile {
        eigenvalues: sums.into_iter().map(|s| s / count).collect(),
        h: first.h,
        sample_id: if profiles.len() == 1 { first.sample_id } else { None },
        estimator: first.estimator,
        samples: profiles.iter().map(|p| p.samples).sum(),
        seed: first.seed,
    })
}

/// Chooses `n` distinct indices out of `len` with a seeded shuffle.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng::rng(seed));
    idx.truncate(n.min(len));
    idx
}

/// Mean profile over `n_points` dataset samples drawn by `seed`.
pub fn average_profile<M: DifferentiableModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    n_points: usize,
    h: f64,
    seed: u64,
    estimator: Estimator,
) -> Result<CurvatureProfile> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let idx = sample_indices(dataset.len(), n_points.max(1), seed);
    let profiles = idx
        .par_iter()
        .map(|&i| {
            let loss = LabeledLoss::new(model, dataset.labels[i]);
            let mut p = curvature_profile(&loss, &dataset.inputs[i], h, estimator)?;
            p.sample_id = Some(i);
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mean = mean_profile(&profiles)?;
    mean.seed = Some(seed);
    Ok(mean)
}
