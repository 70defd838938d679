//! Cell-centred 2D grids and MultiGaussian log-permeability fields.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Uniform cell-centred grid. Cell `(i, j)` has centre
/// `((i + 0.5) dx, (j + 0.5) dy)` and flat index `j * nx + i`; `j = 0` is the
/// southern row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid2D {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize, dx: f64, dy: f64) -> Result<Self> {
        let grid = Grid2D { nx, ny, dx, dy };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::invalid(format!("grid needs at least 2x2 cells, got {}x{}", self.nx, self.ny)));
        }
        if !(self.dx > 0.0 && self.dy > 0.0 && self.dx.is_finite() && self.dy.is_finite()) {
            return Err(Error::invalid(format!("cell sizes must be positive, got {} x {}", self.dx, self.dy)));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn coords(&self, cell: usize) -> (usize, usize) {
        (cell % self.nx, cell / self.nx)
    }

    #[inline]
    pub fn center(&self, cell: usize) -> (f64, f64) {
        let (i, j) = self.coords(cell);
        ((i as f64 + 0.5) * self.dx, (j as f64 + 0.5) * self.dy)
    }

    pub fn extent(&self) -> (f64, f64) {
        (self.nx as f64 * self.dx, self.ny as f64 * self.dy)
    }

    /// Cell containing the physical point `(x, y)`; points on an interior cell
    /// edge belong to the cell on the positive side.
    pub fn cell_containing(&self, x: f64, y: f64) -> Option<usize> {
        let (w, h) = self.extent();
        if !(0.0..w).contains(&x) || !(0.0..h).contains(&y) {
            return None;
        }
        let i = ((x / self.dx).floor() as usize).min(self.nx - 1);
        let j = ((y / self.dy).floor() as usize).min(self.ny - 1);
        Some(self.index(i, j))
    }

    /// Euclidean distance between two cell centres.
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (xa, ya) = self.center(a);
        let (xb, yb) = self.center(b);
        (xa - xb).hypot(ya - yb)
    }
}

/// Per-cell `log10(K [m^2])`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogPermField {
    pub grid: Grid2D,
    pub values: Vec<f64>,
}

impl LogPermField {
    pub fn new(grid: Grid2D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::ShapeMismatch { expected: grid.n_cells(), found: values.len() });
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("log-permeability at cell {bad} is not finite")));
        }
        Ok(LogPermField { grid, values })
    }

    pub fn constant(grid: Grid2D, value: f64) -> Self {
        LogPermField { grid, values: vec![value; grid.n_cells()] }
    }

    /// Permeability in m^2.
    pub fn permeability(&self) -> Vec<f64> {
        self.values.iter().map(|v| 10f64.powf(*v)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationModel {
    /// `1 - 1.5 u + 0.5 u^3` for `u = d/a < 1`, zero beyond the range.
    #[default]
    Spherical,
    /// The quadratic bracket `1 - u (1.5 - 0.5 u)`, kept for sensitivity runs.
    SphericalQuadratic,
    /// `exp(-3 (d/a)^2)`, practical range `a`.
    Gaussian,
}

impl CorrelationModel {
    pub fn correlation(self, d: f64, a: f64) -> Result<f64> {
        check_distance_args(d, a)?;
        let u = d / a;
        Ok(match self {
            CorrelationModel::Spherical => {
                if u < 1.0 {
                    1.0 - 1.5 * u + 0.5 * u * u * u
                } else {
                    0.0
                }
            }
            CorrelationModel::SphericalQuadratic => {
                if u < 1.0 {
                    1.0 - u * (1.5 - 0.5 * u)
                } else {
                    0.0
                }
            }
            CorrelationModel::Gaussian => (-3.0 * u * u).exp(),
        })
    }
}

pub(crate) fn check_distance_args(d: f64, scale: f64) -> Result<()> {
    if !d.is_finite() || d < 0.0 {
        return Err(Error::invalid(format!("distance must be finite and non-negative, got {d}")));
    }
    if !scale.is_finite() || scale <= 0.0 {
        return Err(Error::invalid(format!("length scale must be finite and positive, got {scale}")));
    }
    Ok(())
}

/// Spherical correlation at distance `d` for range `a`.
pub fn spherical_correlation(d: f64, a: f64) -> Result<f64> {
    CorrelationModel::Spherical.correlation(d, a)
}

/// Statistics of a stationary, isotropic MultiGaussian log-permeability field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldStats {
    pub mean: f64,
    pub stddev: f64,
    pub corr_length: f64,
    #[serde(default)]
    pub model: CorrelationModel,
}

impl FieldStats {
    pub fn validate(&self) -> Result<()> {
        if !self.mean.is_finite() {
            return Err(Error::invalid("field mean must be finite"));
        }
        if !(self.stddev >= 0.0 && self.stddev.is_finite()) {
            return Err(Error::invalid(format!("field stddev must be >= 0, got {}", self.stddev)));
        }
        if !(self.corr_length > 0.0 && self.corr_length.is_finite()) {
            return Err(Error::invalid(format!("correlation length must be > 0, got {}", self.corr_length)));
        }
        Ok(())
    }
}

/// Dense covariance `stddev^2 * rho(dist(l, m))` over all cell pairs.
pub fn build_covariance(grid: &Grid2D, stats: &FieldStats) -> Result<DMatrix<f64>> {
    grid.validate()?;
    stats.validate()?;
    let n = grid.n_cells();
    let var = stats.stddev * stats.stddev;
    let mut cov = DMatrix::zeros(n, n);
    for l in 0..n {
        cov[(l, l)] = var;
        for m in 0..l {
            let c = var * stats.model.correlation(grid.distance(l, m), stats.corr_length)?;
            cov[(l, m)] = c;
            cov[(m, l)] = c;
        }
    }
    Ok(cov)
}

/// Exact MultiGaussian sampler: `mean + L z` with `L L^T` the field covariance.
///
/// The factorisation is done once; each sample costs one triangular mat-vec.
#[derive(Clone, Debug)]
pub struct FieldSampler {
    grid: Grid2D,
    stats: FieldStats,
    /// `None` when the field is deterministic (`stddev == 0`).
    factor: Option<DMatrix<f64>>,
}

impl FieldSampler {
    pub fn new(grid: Grid2D, stats: FieldStats) -> Result<Self> {
        let cov = build_covariance(&grid, &stats)?;
        if stats.stddev == 0.0 {
            return Ok(FieldSampler { grid, stats, factor: None });
        }
        let factor = match Cholesky::new(cov.clone()) {
            Some(chol) => chol.unpack(),
            None => {
                let jitter = 1e-10 * stats.stddev * stats.stddev;
                let mut jittered = cov;
                for l in 0..grid.n_cells() {
                    jittered[(l, l)] += jitter;
                }
                Cholesky::new(jittered)
                    .ok_or(Error::DegenerateCovariance { jitter })?
                    .unpack()
            }
        };
        Ok(FieldSampler { grid, stats, factor: Some(factor) })
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn stats(&self) -> &FieldStats {
        &self.stats
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> LogPermField {
        let n = self.grid.n_cells();
        let values = match &self.factor {
            None => vec![self.stats.mean; n],
            Some(l) => {
                let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
                let mut values = vec![self.stats.mean; n];
                for (row, v) in values.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for col in 0..=row {
                        acc += l[(row, col)] * z[col];
                    }
                    *v += acc;
                }
                values
            }
        };
        LogPermField { grid: self.grid, values }
    }

    /// Sample for a keyed stream `(seed, index)`.
    pub fn sample_keyed(&self, seed: u64, index: u64, purpose: Purpose) -> LogPermField {
        self.sample(&mut rng::stream(seed, index, purpose))
    }
}

/// One field for `seed`; identical inputs give a bit-identical field.
pub fn sample_field(grid: &Grid2D, stats: &FieldStats, seed: u64) -> Result<LogPermField> {
    Ok(FieldSampler::new(*grid, *stats)?.sample_keyed(seed, 0, Purpose::TruthField))
}
