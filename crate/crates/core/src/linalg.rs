//! Small dense symmetric eigen-solvers.
//!
//! Cyclic Jacobi for full spectra and Lanczos with full
//! reorthogonalization for extremal eigenvalues of an implicit operator.

use crate::error::{Error, Result};

/// Dense row-major square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let mut m = Self::zeros(n);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), n, "matrix must be square");
            m.data[i * n..(i + 1) * n].copy_from_slice(row);
        }
        m
    }

    pub fn from_row_major(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n);
        Self { n, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, col: &[f64]) {
        for (i, &v) in col.iter().enumerate() {
            self[(i, j)] = v;
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `(A + Aᵀ) / 2`
    pub fn symmetrized(&self) -> Self {
        let mut s = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                s[(i, j)] = 0.5 * (self[(i, j)] + self[(j, i)]);
            }
        }
        s
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn mul(&self, other: &Matrix) -> Matrix {
        let n = self.n;
        let mut out = Matrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self[(i, k)];
                for j in 0..n {
                    out.data[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        out
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..i {
                m = m.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn off_diagonal_norm(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j {
                    s += self[(i, j)] * self[(i, j)];
                }
            }
        }
        s.sqrt()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.n + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
/// Column `k` of `vectors` is the unit eigenvector of `values[k]`.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymmetricEigen {
    pub fn vector(&self, k: usize) -> Vec<f64> {
        self.vectors.column(k)
    }
}

pub const JACOBI_TOL: f64 = 1e-10;
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigen-decomposition. Iterates until the off-diagonal
/// Frobenius norm drops below `tol * max(1, ‖A‖_F)`.
pub fn jacobi_eigen(a: &Matrix, tol: f64, max_sweeps: usize) -> Result<SymmetricEigen> {
    let n = a.n();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius().max(1.0);
    let mut sweeps = 0;
    loop {
        let off = m.off_diagonal_norm();
        if off <= tol * scale {
            break;
        }
        if sweeps == max_sweeps {
            return Err(Error::NoConvergence {
                iterations: sweeps,
                residual: off,
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &v.column(i));
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Extremal Ritz pairs from Lanczos.
#[derive(Clone, Debug)]
pub struct LanczosResult {
    /// Ritz values ascending.
    pub values: Vec<f64>,
    /// Ritz vectors matching `values`.
    pub vectors: Vec<Vec<f64>>,
    pub iterations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Lanczos iteration with full reorthogonalization on a symmetric linear
/// operator of dimension `n`. Runs until the `k` smallest and `k` largest
/// Ritz values have residual below `tol * max(1, |θ|)` or the Krylov space
/// is exhausted. Returns every Ritz pair of the final tridiagonal matrix.
pub fn lanczos<F>(n: usize, mut apply: F, k: usize, start: &[f64], tol: f64) -> Result<LanczosResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let s_norm = norm(start);
    if n == 0 || s_norm == 0.0 {
        return Err(Error::InvalidArgument("Lanczos needs a non-zero start vector".into()));
    }
    let mut basis: Vec<Vec<f64>> = vec![start.iter().map(|v| v / s_norm).collect()];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    loop {
        let j = basis.len() - 1;
        let mut w = apply(&basis[j])?;
        let alpha = dot(&w, &basis[j]);
        alphas.push(alpha);
        // full reorthogonalization, twice for stability
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&w, q);
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= c * qi;
                }
            }
        }
        let beta = norm(&w);
        let m = alphas.len();

        let mut t = Matrix::zeros(m);
        for i in 0..m {
            t[(i, i)] = alphas[i];
            if i + 1 < m {
                t[(i, i + 1)] = betas[i];
                t[(i + 1, i)] = betas[i];
            }
        }
        let eig = jacobi_eigen(&t, 1e-14, 200)?;
        let exhausted = m == n || beta <= 1e-12 * eig.values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        let wanted: Vec<usize> = if 2 * k >= m {
            (0..m).collect()
        } else {
            (0..k).chain(m - k..m).collect()
        };
        let converged = m >= 2 * k.min(n)
            && wanted.iter().all(|&i| {
                let last = eig.vectors[(m - 1, i)];
                (beta * last).abs() <= tol * eig.values[i].abs().max(1.0)
            });
        if exhausted || converged {
            let vectors = (0..m)
                .map(|i| {
                    let mut v = vec![0.0; n];
                    for (jj, q) in basis.iter().enumerate() {
                        let c = eig.vectors[(jj, i)];
                        for (vi, qi) in v.iter_mut().zip(q) {
                            *vi += c * qi;
                        }
                    }
                    v
                })
                .collect();
            return Ok(LanczosResult {
                values: eig.values,
                vectors,
                iterations: m,
            });
        }
        betas.push(beta);
        basis.push(w.iter().map(|v| v / beta).collect());
    }
}

/// Random orthogonal matrix via Gram–Schmidt on Gaussian columns.
pub fn random_orthogonal<R: rand::Rng>(n: usize, rng: &mut R) -> Matrix {
    use rand_distr::{Distribution, StandardNormal};
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for c in &cols {
                let p = dot(&v, c);
                for (vi, ci) in v.iter_mut().zip(c) {
                    *vi -= p * ci;
                }
            }
        }
        let nv = norm(&v);
        if nv > 1e-8 {
            cols.push(v.iter().map(|x| x / nv).collect());
        }
    }
    let mut q = Matrix::zeros(n);
    for (j, c) in cols.iter().enumerate() {
        q.set_column(j, c);
    }
    q
}
