//! Rank-based normal-score transform of ensemble marginals and its
//! back-transform with linear extrapolation towards artificial support
//! points.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::enkf::{kalman_gain_matrix, update_matrix, BlockWeights, PerturbedObservations};
use crate::error::{Error, Result};

/// How far the artificial support points sit beyond the extreme members:
/// three times this spread measure.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadRule {
    /// `max - min` of the marginal.
    #[default]
    Range,
    /// Sample standard deviation of the marginal.
    StdDev,
    /// Gap between each extreme member and its neighbour.
    NeighborGap,
}

/// Shape of the back-transform between the extreme members and the
/// artificial support points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailRule {
    /// Linear in Gaussian space: one node standard deviation per unit beyond
    /// the extreme rank quantile, stopped at the support point.
    #[default]
    LinearZ,
    /// Linear in probability: the empirical CDF runs straight from the
    /// extreme member down to 0 (up to 1) at the support point.
    LinearCdf,
}

fn std_normal() -> Normal {
    Normal::standard()
}

/// `Phi^-1((k - 0.5) / n)` for `k = 1..=n`.
pub fn rank_quantiles(n: usize) -> Vec<f64> {
    let normal = std_normal();
    (0..n).map(|k| normal.inverse_cdf((k as f64 + 0.5) / n as f64)).collect()
}

/// Piecewise-linear empirical CDF of one marginal, anchored at the rank
/// probabilities `(k - 0.5) / n` and at two support points with probability
/// 0 and 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalScoreTable {
    nodes: Vec<f64>,
    quantiles: Vec<f64>,
    lower_support: f64,
    upper_support: f64,
    /// Sample standard deviation of the nodes; slope scale of
    /// [`NormalScoreTable::forward_extended`] beyond the support points.
    scale: f64,
    tail: TailRule,
}

impl NormalScoreTable {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn support(&self) -> (f64, f64) {
        (self.lower_support, self.upper_support)
    }

    pub fn with_tail(mut self, tail: TailRule) -> Self {
        self.tail = tail;
        self
    }

    /// True when every node has the same value.
    pub fn is_degenerate(&self) -> bool {
        self.nodes[0] == self.nodes[self.n() - 1]
    }

    fn n(&self) -> usize {
        self.nodes.len()
    }

    fn rank_prob(&self, k: usize) -> f64 {
        (k as f64 + 0.5) / self.n() as f64
    }

    /// Back-transform of one Gaussian-space value.
    pub fn back(&self, u: f64) -> f64 {
        let n = self.n();
        let q = &self.quantiles;
        if u.is_nan() {
            return u;
        }
        if self.tail == TailRule::LinearZ && (u < q[0] || u > q[n - 1]) {
            let x = if u < q[0] {
                self.nodes[0] + (u - q[0]) * self.scale
            } else {
                self.nodes[n - 1] + (u - q[n - 1]) * self.scale
            };
            return x.clamp(self.lower_support, self.upper_support);
        }
        let p = std_normal().cdf(u);
        if u < q[0] {
            let p0 = self.rank_prob(0);
            let t = (p / p0).clamp(0.0, 1.0);
            return self.lower_support + t * (self.nodes[0] - self.lower_support);
        }
        if u >= q[n - 1] {
            if u == q[n - 1] {
                return self.nodes[n - 1];
            }
            let pn = self.rank_prob(n - 1);
            let t = ((p - pn) / (1.0 - pn)).clamp(0.0, 1.0);
            return self.nodes[n - 1] + t * (self.upper_support - self.nodes[n - 1]);
        }
        // q[k] <= u < q[k + 1]
        let k = q.partition_point(|v| *v <= u) - 1;
        if u == q[k] {
            return self.nodes[k];
        }
        let t = ((p - self.rank_prob(k)) * n as f64).clamp(0.0, 1.0);
        self.nodes[k] + t * (self.nodes[k + 1] - self.nodes[k])
    }

    /// Transform of an arbitrary value (e.g. a perturbed observation) through
    /// the same CDF. Values beyond the support points are moved onto them, and
    /// probabilities are kept at least `0.25 / n` away from 0 and 1 so the
    /// result stays finite.
    pub fn forward(&self, x: f64) -> f64 {
        let n = self.n();
        let x = x.clamp(self.lower_support, self.upper_support);
        let first = self.nodes[0];
        let last = self.nodes[n - 1];
        let p = if x < first {
            let span = first - self.lower_support;
            if span > 0.0 {
                self.rank_prob(0) * (x - self.lower_support) / span
            } else {
                self.rank_prob(0)
            }
        } else if x > last {
            let span = self.upper_support - last;
            let pn = self.rank_prob(n - 1);
            if span > 0.0 {
                pn + (1.0 - pn) * (x - last) / span
            } else {
                pn
            }
        } else {
            // Tied nodes share the average of their rank probabilities.
            let lo = self.nodes.partition_point(|v| *v < x);
            let hi = self.nodes.partition_point(|v| *v <= x);
            if hi > lo {
                (self.rank_prob(lo) + self.rank_prob(hi - 1)) / 2.0
            } else {
                let (a, b) = (lo - 1, lo);
                let t = (x - self.nodes[a]) / (self.nodes[b] - self.nodes[a]);
                self.rank_prob(a) + t / n as f64
            }
        };
        let floor = 0.25 / n as f64;
        std_normal().inverse_cdf(p.clamp(floor, 1.0 - floor))
    }
}

impl NormalScoreTable {
    /// [`NormalScoreTable::forward`] continued linearly beyond the support
    /// points, one unit per standard deviation of the nodes. Used for
    /// observation values, whose noise can be far wider than the ensemble.
    pub fn forward_extended(&self, x: f64) -> f64 {
        if self.scale > 0.0 {
            if x < self.lower_support {
                return self.forward(self.lower_support) - (self.lower_support - x) / self.scale;
            }
            if x > self.upper_support {
                return self.forward(self.upper_support) + (x - self.upper_support) / self.scale;
            }
        }
        self.forward(x)
    }
}

/// Transforms one marginal to its rank quantiles, returning the table for the
/// back-transform. Ties keep their input order.
pub fn normal_score_transform(values: &[f64]) -> Result<(Vec<f64>, NormalScoreTable)> {
    let quantiles = rank_quantiles(values.len());
    normal_score_transform_with(values, SpreadRule::Range, &quantiles)
}

/// As [`normal_score_transform`] with a chosen spread rule and precomputed
/// [`rank_quantiles`] of matching length.
pub fn normal_score_transform_with(
    values: &[f64],
    rule: SpreadRule,
    quantiles: &[f64],
) -> Result<(Vec<f64>, NormalScoreTable)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::invalid("normal-score transform needs at least two values"));
    }
    if quantiles.len() != n {
        return Err(Error::ShapeMismatch { expected: n, found: quantiles.len() });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("normal-score transform of non-finite values"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let nodes: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let mut transformed = vec![0.0; n];
    for (rank, &i) in order.iter().enumerate() {
        transformed[i] = quantiles[rank];
    }
    let mean = nodes.iter().sum::<f64>() / n as f64;
    let sd = (nodes.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let (spread_lo, spread_hi) = match rule {
        SpreadRule::Range => {
            let r = nodes[n - 1] - nodes[0];
            (r, r)
        }
        SpreadRule::StdDev => (sd, sd),
        SpreadRule::NeighborGap => (nodes[1] - nodes[0], nodes[n - 1] - nodes[n - 2]),
    };
    let table = NormalScoreTable {
        lower_support: nodes[0] - 3.0 * spread_lo,
        upper_support: nodes[n - 1] + 3.0 * spread_hi,
        nodes,
        quantiles: quantiles.to_vec(),
        scale: sd,
        tail: TailRule::default(),
    };
    Ok((transformed, table))
}

pub fn normal_score_back(values: &[f64], table: &NormalScoreTable) -> Vec<f64> {
    values.iter().map(|u| table.back(*u)).collect()
}

/// EnKF analysis carried out in normal-score space.
///
/// Every row of `x` is transformed marginally. Perturbed observations go
/// through the table of the entry they observe; the observation noise in
/// transformed space is the sample variance of the transformed perturbations.
pub fn normal_score_update(
    x: &DMatrix<f64>,
    n_params: usize,
    obs_entries: &[usize],
    d: &PerturbedObservations,
    y: &[f64],
    rule: SpreadRule,
    tail: TailRule,
) -> Result<DMatrix<f64>> {
    let (n_s, n_e) = x.shape();
    let quantiles = rank_quantiles(n_e);
    let mut xt = DMatrix::zeros(n_s, n_e);
    let mut tables = Vec::with_capacity(n_s);
    let mut row = vec![0.0; n_e];
    for s in 0..n_s {
        for (i, v) in row.iter_mut().enumerate() {
            *v = x[(s, i)];
        }
        let (t, table) = normal_score_transform_with(&row, rule, &quantiles)?;
        for (i, v) in t.into_iter().enumerate() {
            xt[(s, i)] = v;
        }
        tables.push(table.with_tail(tail));
    }

    // Observations without ensemble spread carry no rank information.
    let used: Vec<usize> = (0..obs_entries.len()).filter(|&m| !tables[obs_entries[m]].is_degenerate()).collect();
    if used.is_empty() {
        return Ok(x.clone());
    }
    let entries: Vec<usize> = used.iter().map(|&m| obs_entries[m]).collect();
    let mut dt = DMatrix::zeros(used.len(), n_e);
    let mut noise_var = vec![0.0; used.len()];
    for (row, &m) in used.iter().enumerate() {
        let table = &tables[obs_entries[m]];
        let y_t = table.forward_extended(y[m]);
        for i in 0..n_e {
            dt[(row, i)] = table.forward_extended(d.d[(m, i)]);
        }
        let eps: Vec<f64> = (0..n_e).map(|i| dt[(row, i)] - y_t).collect();
        let mean = eps.iter().sum::<f64>() / n_e as f64;
        noise_var[row] = eps.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_e - 1) as f64;
    }

    let gain = kalman_gain_matrix(&xt, &entries, &noise_var)?;
    let xa_t = update_matrix(&xt, n_params, &entries, &PerturbedObservations { d: dt }, &gain, BlockWeights::FULL);
    let mut xa = DMatrix::zeros(n_s, n_e);
    for (s, table) in tables.iter().enumerate() {
        for i in 0..n_e {
            xa[(s, i)] = table.back(xa_t[(s, i)]);
        }
    }
    Ok(xa)
}
