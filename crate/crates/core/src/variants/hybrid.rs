//! Hybrid ensemble / static background covariance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::enkf::{add_noise, covariance_terms, scaled_anomalies, Block, Gain, StateLayout};
use crate::error::{Error, Result};

/// Diagonal of the static background covariance, per block of the
/// augmented vector (units squared).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticDiag {
    pub param: f64,
    pub head: f64,
    pub conc: f64,
}

impl Default for StaticDiag {
    fn default() -> Self {
        StaticDiag { param: 0.25, head: 0.05 * 0.05, conc: 7.1e-3 * 7.1e-3 }
    }
}

impl StaticDiag {
    pub fn for_block(&self, block: Block) -> f64 {
        match block {
            Block::Param => self.param,
            Block::Head => self.head,
            Block::Conc => self.conc,
        }
    }
}

/// Gain from `P = beta P_e + (1 - beta) P_static`.
///
/// With a diagonal `P_static`, `P_static H^T` is non-zero only in the rows of
/// the observed entries and `H P_static H^T` is diagonal (up to repeated
/// sites).
pub fn hybrid_gain(
    x: &DMatrix<f64>,
    layout: &StateLayout,
    obs_entries: &[usize],
    noise_var: &[f64],
    beta: f64,
    static_diag: &StaticDiag,
) -> Result<Gain> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta must lie in [0, 1], got {beta}")));
    }
    let a = scaled_anomalies(x)?;
    let (cross, hph) = covariance_terms(&a, obs_entries);
    let mut cross = cross * beta;
    let mut hph = hph * beta;
    for (m, &e) in obs_entries.iter().enumerate() {
        let s = (1.0 - beta) * static_diag.for_block(layout.block_of(e));
        cross[(e, m)] += s;
        for (m2, &e2) in obs_entries.iter().enumerate() {
            if e2 == e {
                hph[(m, m2)] += s;
            }
        }
    }
    Gain::from_parts(cross, add_noise(hph, noise_var))
}
