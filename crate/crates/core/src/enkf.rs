//! Augmented ensembles and the stochastic EnKF analysis.
//!
//! A member's augmented vector is laid out as `[log10 K | head | conc]`, each
//! block `n_g` long (the concentration block only for tracer models). The
//! analysis works on the `n_s x n_e` matrix whose columns are members; the
//! gain is formed from ensemble anomalies without building `P_e`.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::DynamicState;
use crate::grid::{Grid2D, LogPermField};
use crate::rng::{self, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsKind {
    Head,
    Concentration,
}

/// Which block of the augmented vector an entry belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Param,
    Head,
    Conc,
}

impl From<ObsKind> for Block {
    fn from(k: ObsKind) -> Self {
        match k {
            ObsKind::Head => Block::Head,
            ObsKind::Concentration => Block::Conc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateLayout {
    pub grid: Grid2D,
    pub has_conc: bool,
}

impl StateLayout {
    pub fn n_cells(&self) -> usize {
        self.grid.n_cells()
    }

    pub fn n_blocks(&self) -> usize {
        if self.has_conc {
            3
        } else {
            2
        }
    }

    pub fn len(&self) -> usize {
        self.n_blocks() * self.n_cells()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entry(&self, block: Block, cell: usize) -> Result<usize> {
        let n = self.n_cells();
        if cell >= n {
            return Err(Error::invalid(format!("cell {cell} outside grid of {n} cells")));
        }
        match block {
            Block::Param => Ok(cell),
            Block::Head => Ok(n + cell),
            Block::Conc if self.has_conc => Ok(2 * n + cell),
            Block::Conc => Err(Error::invalid("model carries no concentration")),
        }
    }

    pub fn block_of(&self, entry: usize) -> Block {
        match entry / self.n_cells() {
            0 => Block::Param,
            1 => Block::Head,
            _ => Block::Conc,
        }
    }

    /// Grid cell an entry refers to; parameter and state entries of a cell
    /// share its centre.
    pub fn cell_of(&self, entry: usize) -> usize {
        entry % self.n_cells()
    }

    pub fn param_range(&self) -> std::ops::Range<usize> {
        0..self.n_cells()
    }

    pub fn state_range(&self) -> std::ops::Range<usize> {
        self.n_cells()..self.len()
    }
}

/// One realization: parameters plus the dynamic states they produced.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedState {
    pub params: LogPermField,
    pub state: DynamicState,
}

impl AugmentedState {
    pub fn layout(&self) -> StateLayout {
        StateLayout { grid: self.params.grid, has_conc: self.state.conc.is_some() }
    }

    pub fn get(&self, entry: usize) -> f64 {
        let n = self.params.grid.n_cells();
        match entry / n {
            0 => self.params.values[entry],
            1 => self.state.head[entry - n],
            _ => self.state.conc.as_ref().expect("concentration block")[entry - 2 * n],
        }
    }

    pub fn write_column(&self, out: &mut [f64]) {
        let n = self.params.grid.n_cells();
        out[..n].copy_from_slice(&self.params.values);
        out[n..2 * n].copy_from_slice(&self.state.head);
        if let Some(c) = &self.state.conc {
            out[2 * n..3 * n].copy_from_slice(c);
        }
    }

    pub fn read_column(&mut self, col: &[f64]) {
        let n = self.params.grid.n_cells();
        self.params.values.copy_from_slice(&col[..n]);
        self.state.head.copy_from_slice(&col[n..2 * n]);
        if let Some(c) = &mut self.state.conc {
            c.copy_from_slice(&col[2 * n..3 * n]);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub members: Vec<AugmentedState>,
}

impl Ensemble {
    pub fn new(members: Vec<AugmentedState>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::invalid(format!("an ensemble needs at least 2 members, got {}", members.len())));
        }
        let layout = members[0].layout();
        if members.iter().any(|m| m.layout() != layout) {
            return Err(Error::invalid("ensemble members do not share one layout"));
        }
        Ok(Ensemble { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn layout(&self) -> StateLayout {
        self.members[0].layout()
    }

    /// Column-per-member matrix of augmented vectors.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let n_s = self.layout().len();
        let mut m = DMatrix::zeros(n_s, self.len());
        for (i, member) in self.members.iter().enumerate() {
            member.write_column(m.column_mut(i).as_mut_slice());
        }
        m
    }

    /// Copy of `self` with every member overwritten from `matrix` columns.
    pub fn with_matrix(&self, matrix: &DMatrix<f64>) -> Ensemble {
        let mut out = self.clone();
        for (i, member) in out.members.iter_mut().enumerate() {
            member.read_column(matrix.column(i).as_slice());
        }
        out
    }

    /// Ensemble-mean log10 K per cell.
    pub fn mean_params(&self) -> Vec<f64> {
        let n = self.layout().n_cells();
        let mut mean = vec![0.0; n];
        for m in &self.members {
            for (acc, v) in mean.iter_mut().zip(&m.params.values) {
                *acc += v;
            }
        }
        let scale = 1.0 / self.len() as f64;
        mean.iter_mut().for_each(|v| *v *= scale);
        mean
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsSite {
    pub cell: usize,
    pub kind: ObsKind,
}

/// Observations available at one assimilation time.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementBatch {
    /// 1-based assimilation index `j`.
    pub time_index: usize,
    /// Forward step at which the data were taken.
    pub step: usize,
    pub sites: Vec<ObsSite>,
    /// Unperturbed values `y`.
    pub values: Vec<f64>,
    /// Standard deviation of each observation's noise; `R = diag(noise_std^2)`.
    pub noise_std: Vec<f64>,
}

impl MeasurementBatch {
    pub fn validate(&self) -> Result<()> {
        let n_m = self.sites.len();
        if n_m == 0 {
            return Err(Error::invalid("a measurement batch needs at least one observation"));
        }
        if self.values.len() != n_m || self.noise_std.len() != n_m {
            return Err(Error::ShapeMismatch { expected: n_m, found: self.values.len().min(self.noise_std.len()) });
        }
        if self.noise_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("observation noise must be positive"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Augmented-vector entry observed by each measurement (the rows of `H`).
    pub fn entries(&self, layout: &StateLayout) -> Result<Vec<usize>> {
        self.sites.iter().map(|s| layout.entry(s.kind.into(), s.cell)).collect()
    }

    pub fn noise_var(&self) -> Vec<f64> {
        self.noise_std.iter().map(|s| s * s).collect()
    }
}

/// `H x` for one member: the observed variable at each site.
pub fn apply_h(member: &AugmentedState, batch: &MeasurementBatch) -> Result<Vec<f64>> {
    let layout = member.layout();
    Ok(batch.entries(&layout)?.into_iter().map(|e| member.get(e)).collect())
}

/// Perturbed observations `d_i = y + eps_i`, one column per member.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbedObservations {
    pub d: DMatrix<f64>,
}

/// Draws `eps_i ~ N(0, R)` from the stream keyed by `(seed, time_index)`.
///
/// Draws are made member by member, so the first `n` columns do not depend
/// on the ensemble size.
pub fn perturb_observations(batch: &MeasurementBatch, n_e: usize, seed: u64) -> PerturbedObservations {
    let mut rng = rng::stream(seed, batch.time_index as u64, Purpose::ObsPerturbation);
    let n_m = batch.len();
    let mut d = DMatrix::zeros(n_m, n_e);
    for i in 0..n_e {
        for m in 0..n_m {
            let z: f64 = rng.sample(StandardNormal);
            d[(m, i)] = batch.values[m] + batch.noise_std[m] * z;
        }
    }
    PerturbedObservations { d }
}

/// Kalman gain kept in factored form `K = C S^-1`, where `C = P H^T`
/// (possibly tapered or blended) and `S = H P H^T + R`.
#[derive(Clone, Debug)]
pub struct Gain {
    pub cross: DMatrix<f64>,
    innovation: Cholesky<f64, Dyn>,
}

impl Gain {
    pub fn from_parts(cross: DMatrix<f64>, innovation_cov: DMatrix<f64>) -> Result<Self> {
        if innovation_cov.nrows() != cross.ncols() || !innovation_cov.is_square() {
            return Err(Error::ShapeMismatch { expected: cross.ncols(), found: innovation_cov.nrows() });
        }
        let innovation = Cholesky::new(innovation_cov).ok_or(Error::SingularInnovation)?;
        Ok(Gain { cross, innovation })
    }

    /// Dense `n_s x n_m` gain.
    pub fn matrix(&self) -> DMatrix<f64> {
        let s_inv = self.innovation.inverse();
        &self.cross * s_inv
    }

    /// `K * innovations` for a block of innovation columns.
    pub fn increments(&self, innovations: &DMatrix<f64>) -> DMatrix<f64> {
        &self.cross * self.innovation.solve(innovations)
    }

    pub fn n_obs(&self) -> usize {
        self.cross.ncols()
    }
}

/// Ensemble anomalies `A = X - mean(X)` scaled by `1/sqrt(n_e - 1)`, so that
/// `P_e = A A^T`.
pub fn scaled_anomalies(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n_e = x.ncols();
    if n_e < 2 {
        return Err(Error::invalid("need at least two members for an ensemble covariance"));
    }
    let scale = 1.0 / ((n_e - 1) as f64).sqrt();
    let mut a = x.clone();
    for mut row in a.row_iter_mut() {
        let mean = row.sum() / n_e as f64;
        row.apply(|v| *v = (*v - mean) * scale);
    }
    Ok(a)
}

/// `(P_e H^T, H P_e H^T)` from scaled anomalies.
pub fn covariance_terms(anomalies: &DMatrix<f64>, entries: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
    let ha = anomalies.select_rows(entries);
    let cross = anomalies * ha.transpose();
    let hph = &ha * ha.transpose();
    (cross, hph)
}

pub(crate) fn add_noise(mut hph: DMatrix<f64>, noise_var: &[f64]) -> DMatrix<f64> {
    for (m, r) in noise_var.iter().enumerate() {
        hph[(m, m)] += r;
    }
    hph
}

/// Classical gain for an ensemble matrix observed at `entries`.
pub fn kalman_gain_matrix(x: &DMatrix<f64>, entries: &[usize], noise_var: &[f64]) -> Result<Gain> {
    if entries.len() != noise_var.len() {
        return Err(Error::ShapeMismatch { expected: entries.len(), found: noise_var.len() });
    }
    let a = scaled_anomalies(x)?;
    let (cross, hph) = covariance_terms(&a, entries);
    Gain::from_parts(cross, add_noise(hph, noise_var))
}

pub fn kalman_gain(ensemble: &Ensemble, batch: &MeasurementBatch) -> Result<Gain> {
    batch.validate()?;
    let entries = batch.entries(&ensemble.layout())?;
    kalman_gain_matrix(&ensemble.to_matrix(), &entries, &batch.noise_var())
}

/// `d_i - H x_i` for every member.
pub fn innovations(x: &DMatrix<f64>, entries: &[usize], d: &PerturbedObservations) -> DMatrix<f64> {
    d.d.clone() - x.select_rows(entries)
}

/// How strongly the parameter and state blocks take their increments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockWeights {
    pub params: f64,
    pub states: f64,
}

impl BlockWeights {
    pub const FULL: BlockWeights = BlockWeights { params: 1.0, states: 1.0 };
    pub const PARAMS_ONLY: BlockWeights = BlockWeights { params: 1.0, states: 0.0 };
    pub const STATES_ONLY: BlockWeights = BlockWeights { params: 0.0, states: 1.0 };
}

/// `x_i + w_block * K (d_i - H x_i)` on the matrix form.
pub fn update_matrix(
    x: &DMatrix<f64>,
    n_params: usize,
    entries: &[usize],
    d: &PerturbedObservations,
    gain: &Gain,
    weights: BlockWeights,
) -> DMatrix<f64> {
    let mut inc = gain.increments(&innovations(x, entries, d));
    if weights.params != 1.0 {
        inc.rows_mut(0, n_params).scale_mut(weights.params);
    }
    if weights.states != 1.0 {
        let n_states = inc.nrows() - n_params;
        inc.rows_mut(n_params, n_states).scale_mut(weights.states);
    }
    x + inc
}

pub fn weighted_update(
    ensemble: &Ensemble,
    batch: &MeasurementBatch,
    d: &PerturbedObservations,
    gain: &Gain,
    weights: BlockWeights,
) -> Result<Ensemble> {
    let layout = ensemble.layout();
    let entries = batch.entries(&layout)?;
    if d.d.ncols() != ensemble.len() || d.d.nrows() != entries.len() {
        return Err(Error::ShapeMismatch { expected: ensemble.len(), found: d.d.ncols() });
    }
    let x = ensemble.to_matrix();
    let xa = update_matrix(&x, layout.n_cells(), &entries, d, gain, weights);
    Ok(ensemble.with_matrix(&xa))
}

/// `x_i^a = x_i^f + K (d_i - H x_i^f)` for every member; returns a new ensemble.
pub fn analysis_update(
    ensemble: &Ensemble,
    batch: &MeasurementBatch,
    d: &PerturbedObservations,
    gain: &Gain,
) -> Result<Ensemble> {
    weighted_update(ensemble, batch, d, gain, BlockWeights::FULL)
}
