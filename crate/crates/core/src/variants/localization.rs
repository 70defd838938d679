//! Distance-based covariance localization with the Gaspari-Cohn taper.

use nalgebra::DMatrix;

use crate::enkf::{add_noise, covariance_terms, scaled_anomalies, Gain, StateLayout};
use crate::error::Result;
use crate::grid::check_distance_args;

/// Support scale `a` of the taper for a localization length `lambda`.
pub fn support_scale(lambda: f64) -> f64 {
    (10.0f64 / 3.0).sqrt() * lambda
}

/// Fifth-order piecewise-rational taper of Gaspari and Cohn,
/// evaluated at `u = d / a` with `a = sqrt(10/3) * lambda`. Equals 1 at the
/// origin and vanishes for `d >= 2a`.
pub fn gaspari_cohn(d: f64, lambda: f64) -> Result<f64> {
    check_distance_args(d, lambda)?;
    Ok(gaspari_cohn_unit(d / support_scale(lambda)))
}

pub(crate) fn gaspari_cohn_unit(u: f64) -> f64 {
    if u < 1.0 {
        gc_inner(u)
    } else if u < 2.0 {
        gc_outer(u)
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn gc_inner(u: f64) -> f64 {
    (((-0.25 * u + 0.5) * u + 0.625) * u - 5.0 / 3.0) * u * u + 1.0
}

#[inline]
pub(crate) fn gc_outer(u: f64) -> f64 {
    ((((u / 12.0 - 0.5) * u + 0.625) * u + 5.0 / 3.0) * u - 5.0) * u + 4.0 - 2.0 / (3.0 * u)
}

/// Taper weights `rho[s, m]` between every augmented entry and every
/// observed entry.
pub fn taper_matrix(layout: &StateLayout, obs_entries: &[usize], lambda: f64) -> Result<DMatrix<f64>> {
    check_distance_args(0.0, lambda)?;
    let grid = layout.grid;
    let a = support_scale(lambda);
    let n = layout.n_cells();
    let mut per_cell = DMatrix::zeros(n, obs_entries.len());
    for (m, &e) in obs_entries.iter().enumerate() {
        let obs_cell = layout.cell_of(e);
        for cell in 0..n {
            per_cell[(cell, m)] = gaspari_cohn_unit(grid.distance(cell, obs_cell) / a);
        }
    }
    Ok(DMatrix::from_fn(layout.len(), obs_entries.len(), |s, m| per_cell[(layout.cell_of(s), m)]))
}

/// `K_loc = [rho o (P_e H^T)] (H P_e H^T + R)^-1`; the innovation covariance
/// is left untapered.
pub fn localized_gain(
    x: &DMatrix<f64>,
    layout: &StateLayout,
    obs_entries: &[usize],
    noise_var: &[f64],
    lambda: f64,
) -> Result<Gain> {
    let a = scaled_anomalies(x)?;
    let (cross, hph) = covariance_terms(&a, obs_entries);
    let rho = taper_matrix(layout, obs_entries, lambda)?;
    Gain::from_parts(cross.component_mul(&rho), add_noise(hph, noise_var))
}
