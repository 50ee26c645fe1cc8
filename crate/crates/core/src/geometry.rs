//! Two-dimensional slices of input space through a data point: decision
//! regions and loss surfaces on a plane spanned by a boundary normal and a
//! random orthogonal direction.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{deepfool, DeepFoolNorm, DEEPFOOL_MAX_ITERS};
use crate::error::{Error, Result};
use crate::objective::DifferentiableModel;
use crate::rng;
use crate::tensor::Tensor;

const UNIT_TOL: f64 = 1e-9;
const MAX_REDRAWS: usize = 32;

/// Plane `x + a·r + b·v` sampled on a regular grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub center: Tensor,
    pub r: Tensor,
    pub v: Tensor,
    /// `(r_min, r_max, v_min, v_max)`.
    pub extent: (f64, f64, f64, f64),
    /// `(n_r, n_v)`.
    pub resolution: (usize, usize),
}

impl PlaneSpec {
    /// Square plane of half-width `half` with `n × n` cells.
    pub fn square(center: Tensor, r: Tensor, v: Tensor, half: f64, n: usize) -> Result<Self> {
        let p = Self {
            center,
            r,
            v,
            extent: (-half, half, -half, half),
            resolution: (n, n),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("r", &self.r), ("v", &self.v)] {
            if t.shape() != self.center.shape() {
                return Err(Error::ShapeMismatch {
                    op: "plane",
                    detail: format!(
                        "direction {name} has shape {:?}, center {:?}",
                        t.shape(),
                        self.center.shape()
                    ),
                });
            }
            if (t.norm2() - 1.0).abs() > UNIT_TOL {
                return Err(Error::InvalidArgument(format!("direction {name} must be unit norm")));
            }
        }
        let (a0, a1, b0, b1) = self.extent;
        if !(a1 > a0 && b1 > b0) {
            return Err(Error::InvalidArgument(format!("empty plane extent {:?}", self.extent)));
        }
        if self.resolution.0 < 2 || self.resolution.1 < 2 {
            return Err(Error::InvalidArgument("plane resolution must be ≥ 2 per axis".into()));
        }
        Ok(())
    }

    /// Coordinate of column `i` along `r`.
    pub fn a(&self, i: usize) -> f64 {
        let (lo, hi, _, _) = self.extent;
        lo + (hi - lo) * i as f64 / (self.resolution.0 - 1) as f64
    }

    /// Coordinate of row `j` along `v`.
    pub fn b(&self, j: usize) -> f64 {
        let (_, _, lo, hi) = self.extent;
        lo + (hi - lo) * j as f64 / (self.resolution.1 - 1) as f64
    }

    pub fn point(&self, i: usize, j: usize) -> Tensor {
        self.center.axpy(self.a(i), &self.r).axpy(self.b(j), &self.v)
    }

    fn eval_grid<T: Send>(&self, f: impl Fn(&Tensor) -> Result<T> + Sync) -> Result<Vec<Vec<T>>> {
        self.validate()?;
        (0..self.resolution.1)
            .into_par_iter()
            .map(|j| (0..self.resolution.0).map(|i| f(&self.point(i, j))).collect())
            .collect()
    }
}

/// Unit boundary normal from the minimal ℓ₂ DeepFool perturbation.
#[derive(Clone, Debug)]
pub struct BoundaryNormal {
    pub direction: Tensor,
    /// `‖r‖₂` of the perturbation before overshoot.
    pub radius: f64,
}

pub fn normal_direction<M: DifferentiableModel + ?Sized>(model: &M, x: &Tensor) -> Result<BoundaryNormal> {
    let res = deepfool(model, x, DeepFoolNorm::L2, DEEPFOOL_MAX_ITERS)?;
    let radius = res.r.norm2();
    if radius == 0.0 {
        return Err(Error::ZeroGradient("boundary normal undefined"));
    }
    Ok(BoundaryNormal {
        direction: res.r.scale(1.0 / radius),
        radius,
    })
}

/// Gaussian draw with its component along unit `r` removed, normalized.
pub fn random_orthogonal_direction(r: &Tensor, seed: u64) -> Result<Tensor> {
    let mut g = rng::rng(seed);
    for _ in 0..MAX_REDRAWS {
        let v = Tensor::new(
            r.shape().to_vec(),
            (0..r.len()).map(|_| StandardNormal.sample(&mut g)).collect(),
        )?;
        let res = v.axpy(-v.dot(r), r);
        let n = res.norm2();
        if n >= 1e-12 {
            return Ok(res.scale(1.0 / n));
        }
    }
    Err(Error::InvalidArgument(format!(
        "no orthogonal direction found after {MAX_REDRAWS} draws"
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    CrossSection,
    LossSurface,
}

impl GridKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            GridKind::CrossSection => "cross_section",
            GridKind::LossSurface => "loss_surface",
        }
    }
}

/// Grid values, `cells[j][i]` at `x + a_i r + b_j v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub kind: GridKind,
    pub plane: PlaneSpec,
    pub true_label: usize,
    pub cells: Vec<Vec<f64>>,
}

impl Grid {
    /// Predicted class per cell (cross-sections only).
    pub fn class_at(&self, i: usize, j: usize) -> usize {
        self.cells[j][i] as usize
    }

    pub fn correct_at(&self, i: usize, j: usize) -> bool {
        self.class_at(i, j) == self.true_label
    }

    pub fn to_csv(&self) -> String {
        let p = &self.plane;
        let mut s = String::new();
        let _ = writeln!(s, "# kind={}", self.kind.as_str());
        let _ = writeln!(s, "# true_label={}", self.true_label);
        let _ = writeln!(s, "# r_range={},{} n_r={}", p.extent.0, p.extent.1, p.resolution.0);
        let _ = writeln!(s, "# v_range={},{} n_v={}", p.extent.2, p.extent.3, p.resolution.1);
        let _ = writeln!(s, "# rows index v ascending; columns index r ascending");
        for row in &self.cells {
            let line: Vec<String> = row
                .iter()
                .map(|v| match self.kind {
                    GridKind::CrossSection => format!("{}", *v as usize),
                    GridKind::LossSurface => format!("{v:e}"),
                })
                .collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    pub fn sidecar(&self, tag: &str, sample_id: usize, seed: Option<u64>) -> GridSidecar {
        GridSidecar {
            tag: tag.to_string(),
            sample_id,
            kind: self.kind,
            true_label: self.true_label,
            x: self.plane.center.data().to_vec(),
            r: self.plane.r.data().to_vec(),
            v: self.plane.v.data().to_vec(),
            extent: self.plane.extent,
            resolution: self.plane.resolution,
            seed,
        }
    }

    /// Writes `<tag>_<sample_id>_<kind>.csv` and its `.json` sidecar.
    pub fn write(&self, dir: &Path, tag: &str, sample_id: usize, seed: Option<u64>) -> Result<(PathBuf, PathBuf)> {
        let stem = format!("{tag}_{sample_id}_{}", self.kind.as_str());
        let csv = dir.join(format!("{stem}.csv"));
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&csv, self.to_csv())?;
        std::fs::write(
            &json,
            serde_json::to_string_pretty(&self.sidecar(tag, sample_id, seed))?,
        )?;
        Ok((csv, json))
    }
}

/// Everything needed to replay a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSidecar {
    pub tag: String,
    pub sample_id: usize,
    pub kind: GridKind,
    pub true_label: usize,
    pub x: Vec<f64>,
    pub r: Vec<f64>,
    pub v: Vec<f64>,
    pub extent: (f64, f64, f64, f64),
    pub resolution: (usize, usize),
    pub seed: Option<u64>,
}

/// Predicted class at every grid point.
pub fn boundary_cross_section<M: DifferentiableModel + ?Sized>(
    model: &M,
    plane: &PlaneSpec,
    true_label: usize,
) -> Result<Grid> {
    let cells = plane.eval_grid(|p| Ok(model.predict(p)? as f64))?;
    Ok(Grid {
        kind: GridKind::CrossSection,
        plane: plane.clone(),
        true_label,
        cells,
    })
}

/// `−ℓ` at every grid point.
pub fn loss_surface<M: DifferentiableModel + ?Sized>(model: &M, plane: &PlaneSpec, true_label: usize) -> Result<Grid> {
    let cells = plane.eval_grid(|p| Ok(-model.loss_grad(p, true_label)?.0))?;
    Ok(Grid {
        kind: GridKind::LossSurface,
        plane: plane.clone(),
        true_label,
        cells,
    })
}
