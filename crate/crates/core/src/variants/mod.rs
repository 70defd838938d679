//! The assimilation strategies compared by the harness.
//!
//! Single-step variants (classical, damped, local, hybrid, normal-score) only
//! change the analysis at each assimilation time and share the sequential
//! driver. Dual and iterative variants own their loop structure because they
//! re-simulate intervals.

pub mod hybrid;
pub mod localization;
pub mod normal_score;

use serde::{Deserialize, Serialize};

use crate::enkf::{
    kalman_gain_matrix, perturb_observations, update_matrix, BlockWeights, Ensemble, Gain, MeasurementBatch,
    PerturbedObservations,
};
use crate::error::{Error, Result};

pub use hybrid::{hybrid_gain, StaticDiag};
pub use localization::{gaspari_cohn, localized_gain, support_scale};
pub use normal_score::{normal_score_back, normal_score_transform, NormalScoreTable, SpreadRule, TailRule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Classical,
    Damped,
    Local,
    Hybrid,
    Dual,
    NormalScore,
    Iterative,
}

impl VariantKind {
    pub const ALL: [VariantKind; 7] = [
        VariantKind::Classical,
        VariantKind::Damped,
        VariantKind::Local,
        VariantKind::Hybrid,
        VariantKind::Dual,
        VariantKind::NormalScore,
        VariantKind::Iterative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Classical => "classical",
            VariantKind::Damped => "damped",
            VariantKind::Local => "local",
            VariantKind::Hybrid => "hybrid",
            VariantKind::Dual => "dual",
            VariantKind::NormalScore => "normal_score",
            VariantKind::Iterative => "iterative",
        }
    }

    pub fn parse(s: &str) -> Result<VariantKind> {
        VariantKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant kind `{s}`")))
    }
}

impl std::fmt::Display for VariantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A variant together with its tuning constants. Fields that do not apply to
/// `kind` are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantConfig {
    pub kind: VariantKind,
    /// Damping factor on parameter increments.
    pub alpha: f64,
    /// Localization length (m).
    pub lambda: f64,
    /// Weight of the ensemble covariance in the hybrid blend.
    pub beta: f64,
    pub static_diag: StaticDiag,
    pub ns_spread: SpreadRule,
    pub ns_tail: TailRule,
    /// Multiplies every observation noise standard deviation.
    pub noise_scale: f64,
    /// Identifier written to result tables; defaults to the kind name.
    pub label: Option<String>,
}

impl Default for VariantConfig {
    fn default() -> Self {
        VariantConfig {
            kind: VariantKind::Classical,
            alpha: 0.1,
            lambda: 150.0,
            beta: 0.5,
            static_diag: StaticDiag::default(),
            ns_spread: SpreadRule::Range,
            ns_tail: TailRule::LinearZ,
            noise_scale: 1.0,
            label: None,
        }
    }
}

impl VariantConfig {
    pub fn new(kind: VariantKind) -> Self {
        VariantConfig { kind, ..Default::default() }
    }

    pub fn id(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.kind.name().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(format!("variant {}: {msg}", self.id())));
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("noise_scale must be positive, got {}", self.noise_scale));
        }
        match self.kind {
            VariantKind::Damped if !(self.alpha > 0.0 && self.alpha <= 1.0) => {
                bad(format!("alpha must lie in (0, 1], got {}", self.alpha))
            }
            VariantKind::Local if !(self.lambda > 0.0 && self.lambda.is_finite()) => {
                bad(format!("lambda must be positive, got {}", self.lambda))
            }
            VariantKind::Hybrid if !(0.0..=1.0).contains(&self.beta) => {
                bad(format!("beta must lie in [0, 1], got {}", self.beta))
            }
            VariantKind::Hybrid => {
                let d = self.static_diag;
                if [d.param, d.head, d.conc].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                    bad("static variances must be non-negative".into())
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Gain the variant uses for a single analysis of `x`.
fn variant_gain(config: &VariantConfig, ensemble: &Ensemble, x: &nalgebra::DMatrix<f64>, entries: &[usize], noise_var: &[f64]) -> Result<Gain> {
    let layout = ensemble.layout();
    match config.kind {
        VariantKind::Local => localized_gain(x, &layout, entries, noise_var, config.lambda),
        VariantKind::Hybrid => hybrid_gain(x, &layout, entries, noise_var, config.beta, &config.static_diag),
        _ => kalman_gain_matrix(x, entries, noise_var),
    }
}

/// One analysis step of a single-step variant (dual and iterative fall back
/// to the classical update here).
pub fn analysis(
    config: &VariantConfig,
    ensemble: &Ensemble,
    batch: &MeasurementBatch,
    d: &PerturbedObservations,
) -> Result<Ensemble> {
    batch.validate()?;
    let layout = ensemble.layout();
    let entries = batch.entries(&layout)?;
    if d.d.shape() != (entries.len(), ensemble.len()) {
        return Err(Error::ShapeMismatch { expected: ensemble.len(), found: d.d.ncols() });
    }
    let x = ensemble.to_matrix();
    let n_params = layout.n_cells();
    let xa = match config.kind {
        VariantKind::NormalScore => {
            normal_score::normal_score_update(&x, n_params, &entries, d, &batch.values, config.ns_spread, config.ns_tail)?
        }
        kind => {
            let gain = variant_gain(config, ensemble, &x, &entries, &batch.noise_var())?;
            let weights = if kind == VariantKind::Damped {
                BlockWeights { params: config.alpha, states: 1.0 }
            } else {
                BlockWeights::FULL
            };
            update_matrix(&x, n_params, &entries, d, &gain, weights)
        }
    };
    if xa.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("analysis produced non-finite values"));
    }
    Ok(ensemble.with_matrix(&xa))
}

/// Damped update with an externally supplied gain: parameter increments are
/// scaled by `alpha`, state increments are left as they are.
pub fn damped_update(
    ensemble: &Ensemble,
    batch: &MeasurementBatch,
    d: &PerturbedObservations,
    gain: &Gain,
    alpha: f64,
) -> Result<Ensemble> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    crate::enkf::weighted_update(ensemble, batch, d, gain, BlockWeights { params: alpha, states: 1.0 })
}

/// Advances ensembles through the forward model.
pub trait Propagator: Sync {
    /// Advances every member from `from_step` by `n_steps`; parameters are
    /// left untouched.
    fn propagate(&self, ensemble: &Ensemble, from_step: usize, n_steps: usize) -> Result<Ensemble>;

    /// Copy of `ensemble` with dynamic states reset to the initial conditions.
    fn restart(&self, ensemble: &Ensemble) -> Ensemble;
}

/// Result of a complete assimilation run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// Final ensemble, or the last valid one if the run failed.
    pub ensemble: Ensemble,
    /// Ensemble forward steps performed (a step of all members counts once).
    pub forward_steps: usize,
    pub failure: Option<String>,
}

/// Observation batch with the variant's noise scaling applied.
fn scaled_batch(config: &VariantConfig, batch: &MeasurementBatch) -> MeasurementBatch {
    let mut b = batch.clone();
    if config.noise_scale != 1.0 {
        b.noise_std.iter_mut().for_each(|s| *s *= config.noise_scale);
    }
    b
}

fn check_schedule(batches: &[MeasurementBatch]) -> Result<()> {
    let mut prev = 0;
    for b in batches {
        if b.step <= prev && !(prev == 0 && b.step == 0) {
            return Err(Error::invalid("assimilation steps must be strictly increasing"));
        }
        prev = b.step;
    }
    Ok(())
}

/// Runs `config` over all `batches` starting from `initial`. Observation
/// perturbations are drawn from streams keyed by `seed` and each batch's time
/// index, so variants sharing a seed see identical draws.
pub fn run_variant(
    config: &VariantConfig,
    propagator: &dyn Propagator,
    initial: Ensemble,
    batches: &[MeasurementBatch],
    seed: u64,
) -> Result<RunOutcome> {
    config.validate()?;
    check_schedule(batches)?;
    let mut run = Run { ensemble: initial, forward_steps: 0 };
    let result = match config.kind {
        VariantKind::Dual => run.dual(config, propagator, batches, seed),
        VariantKind::Iterative => run.iterative(config, propagator, batches, seed),
        _ => run.sequential(config, propagator, batches, seed),
    };
    Ok(RunOutcome { ensemble: run.ensemble, forward_steps: run.forward_steps, failure: result.err().map(|e| e.to_string()) })
}

struct Run {
    ensemble: Ensemble,
    forward_steps: usize,
}

impl Run {
    fn propagate(&mut self, p: &dyn Propagator, ens: &Ensemble, from: usize, n: usize) -> Result<Ensemble> {
        self.forward_steps += n;
        p.propagate(ens, from, n)
    }

    fn sequential(&mut self, config: &VariantConfig, p: &dyn Propagator, batches: &[MeasurementBatch], seed: u64) -> Result<()> {
        let mut at = 0;
        for raw in batches {
            let batch = scaled_batch(config, raw);
            let current = self.ensemble.clone();
            let forecast = self.propagate(p, &current, at, batch.step - at)?;
            self.ensemble = forecast;
            at = batch.step;
            let d = perturb_observations(&batch, self.ensemble.len(), seed);
            self.ensemble = analysis(config, &self.ensemble, &batch, &d)?;
        }
        Ok(())
    }

    fn dual(&mut self, config: &VariantConfig, p: &dyn Propagator, batches: &[MeasurementBatch], seed: u64) -> Result<()> {
        let mut at = 0;
        for raw in batches {
            let batch = scaled_batch(config, raw);
            let previous = self.ensemble.clone();
            let n = batch.step - at;
            let d = perturb_observations(&batch, previous.len(), seed);
            let forecast = self.propagate(p, &previous, at, n)?;
            self.ensemble = forecast.clone();
            let mut restarted = dual_parameter_stage(&forecast, &previous, &batch, &d)?;
            let resimulated = self.propagate(p, &restarted, at, n)?;
            self.ensemble = resimulated.clone();
            restarted = dual_state_stage(&resimulated, &batch, &d)?;
            self.ensemble = restarted;
            at = batch.step;
        }
        Ok(())
    }

    fn iterative(&mut self, config: &VariantConfig, p: &dyn Propagator, batches: &[MeasurementBatch], seed: u64) -> Result<()> {
        let classical = VariantConfig { kind: VariantKind::Classical, ..config.clone() };
        for raw in batches {
            let batch = scaled_batch(config, raw);
            let restarted = p.restart(&self.ensemble);
            let forecast = self.propagate(p, &restarted, 0, batch.step)?;
            self.ensemble = forecast;
            let d = perturb_observations(&batch, self.ensemble.len(), seed);
            self.ensemble = analysis(&classical, &self.ensemble, &batch, &d)?;
        }
        Ok(())
    }
}

/// First dual stage: parameter-only update of `forecast` using the
/// parameter rows of the classical gain. Returns `previous` (the analysis
/// from the last assimilation time) carrying the updated parameters, ready
/// to be re-simulated.
pub fn dual_parameter_stage(
    forecast: &Ensemble,
    previous: &Ensemble,
    batch: &MeasurementBatch,
    d: &PerturbedObservations,
) -> Result<Ensemble> {
    let layout = forecast.layout();
    let entries = batch.entries(&layout)?;
    let x = forecast.to_matrix();
    let gain = kalman_gain_matrix(&x, &entries, &batch.noise_var())?;
    let xa = update_matrix(&x, layout.n_cells(), &entries, d, &gain, BlockWeights::PARAMS_ONLY);
    if xa.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("parameter update produced non-finite values"));
    }
    let mut out = previous.clone();
    let n = layout.n_cells();
    for (i, member) in out.members.iter_mut().enumerate() {
        member.params.values.copy_from_slice(&xa.column(i).as_slice()[..n]);
    }
    Ok(out)
}

/// Second dual stage: state-only update of the re-simulated ensemble with the
/// same perturbed observations.
pub fn dual_state_stage(resimulated: &Ensemble, batch: &MeasurementBatch, d: &PerturbedObservations) -> Result<Ensemble> {
    let layout = resimulated.layout();
    let entries = batch.entries(&layout)?;
    let x = resimulated.to_matrix();
    let gain = kalman_gain_matrix(&x, &entries, &batch.noise_var())?;
    let xa = update_matrix(&x, layout.n_cells(), &entries, d, &gain, BlockWeights::STATES_ONLY);
    if xa.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("state update produced non-finite values"));
    }
    Ok(resimulated.with_matrix(&xa))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enkf::{AugmentedState, ObsKind, ObsSite};
    use crate::forward::DynamicState;
    use crate::grid::{Grid2D, LogPermField};
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Toy dynamics: each step adds 0.01 * param to head, so states depend
    /// on parameters and the forward map is cheap.
    struct Toy {
        calls: AtomicUsize,
        initial_head: f64,
    }

    impl Propagator for Toy {
        fn propagate(&self, ensemble: &Ensemble, _from: usize, n: usize) -> Result<Ensemble> {
            self.calls.fetch_add(n, Ordering::Relaxed);
            let mut out = ensemble.clone();
            for m in &mut out.members {
                for (h, k) in m.state.head.iter_mut().zip(&m.params.values) {
                    *h += 0.01 * n as f64 * (k + 12.0);
                }
            }
            Ok(out)
        }

        fn restart(&self, ensemble: &Ensemble) -> Ensemble {
            let mut out = ensemble.clone();
            for m in &mut out.members {
                m.state.head.iter_mut().for_each(|h| *h = self.initial_head);
            }
            out
        }
    }

    fn toy() -> Toy {
        Toy { calls: AtomicUsize::new(0), initial_head: 10.0 }
    }

    fn ensemble(n_e: usize, seed: u64) -> Ensemble {
        let grid = Grid2D::new(3, 2, 1.0, 1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let members = (0..n_e)
            .map(|_| {
                let values = (0..6).map(|_| -12.5 + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
                AugmentedState {
                    params: LogPermField::new(grid, values).unwrap(),
                    state: DynamicState { head: vec![10.0; 6], conc: None },
                }
            })
            .collect();
        Ensemble::new(members).unwrap()
    }

    fn schedule(n_t: usize, interval: usize) -> Vec<MeasurementBatch> {
        (1..=n_t)
            .map(|j| MeasurementBatch {
                time_index: j,
                step: j * interval,
                sites: vec![ObsSite { cell: 1, kind: ObsKind::Head }, ObsSite { cell: 4, kind: ObsKind::Head }],
                values: vec![10.0 + 0.001 * j as f64, 10.0],
                noise_std: vec![0.05, 0.05],
            })
            .collect()
    }

    fn run(kind: VariantKind, n_t: usize) -> RunOutcome {
        run_variant(&VariantConfig::new(kind), &toy(), ensemble(8, 1), &schedule(n_t, 3), 42).unwrap()
    }

    #[test]
    fn step_counter_identities() {
        for n_t in [1, 4, 10] {
            let classical = run(VariantKind::Classical, n_t).forward_steps;
            assert_eq!(classical, 3 * n_t);
            assert_eq!(run(VariantKind::Dual, n_t).forward_steps, 2 * classical);
            assert_eq!(2 * run(VariantKind::Iterative, n_t).forward_steps, classical * (n_t + 1));
        }
    }

    #[test]
    fn single_time_iterative_matches_classical() {
        let a = run(VariantKind::Classical, 1);
        let b = run(VariantKind::Iterative, 1);
        assert_eq!(a.ensemble, b.ensemble);
        assert_eq!(a.forward_steps, b.forward_steps);
    }

    #[test]
    fn degenerate_settings_reproduce_classical() {
        let base = run(VariantKind::Classical, 5).ensemble.to_matrix();
        let configs = [
            VariantConfig { alpha: 1.0, ..VariantConfig::new(VariantKind::Damped) },
            VariantConfig { beta: 1.0, ..VariantConfig::new(VariantKind::Hybrid) },
            VariantConfig { lambda: 1e9, ..VariantConfig::new(VariantKind::Local) },
        ];
        for c in configs {
            let out = run_variant(&c, &toy(), ensemble(8, 1), &schedule(5, 3), 42).unwrap();
            let x = out.ensemble.to_matrix();
            let rel = (&x - &base).norm() / base.norm();
            assert!(rel < 1e-12, "{}: {rel}", c.id());
        }
    }

    #[test]
    fn damping_scales_parameter_increment_only() {
        let ens = ensemble(10, 3);
        let batch = &schedule(1, 3)[0];
        let d = perturb_observations(batch, 10, 7);
        let classical = analysis(&VariantConfig::new(VariantKind::Classical), &ens, batch, &d).unwrap();
        let damped = analysis(&VariantConfig::new(VariantKind::Damped), &ens, batch, &d).unwrap();
        let (x0, xc, xd) = (ens.to_matrix(), classical.to_matrix(), damped.to_matrix());
        for s in 0..x0.nrows() {
            for i in 0..10 {
                let full = xc[(s, i)] - x0[(s, i)];
                let got = xd[(s, i)] - x0[(s, i)];
                let want = if s < 6 { 0.1 * full } else { full };
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_innovation_leaves_ensemble_unchanged() {
        let ens = ensemble(6, 4);
        let batch = &schedule(1, 3)[0];
        let entries = batch.entries(&ens.layout()).unwrap();
        let d = PerturbedObservations { d: ens.to_matrix().select_rows(&entries) };
        for kind in [VariantKind::Classical, VariantKind::Damped, VariantKind::Local, VariantKind::Hybrid] {
            let out = analysis(&VariantConfig::new(kind), &ens, batch, &d).unwrap();
            assert!((out.to_matrix() - ens.to_matrix()).abs().max() < 1e-12, "{kind}");
        }
    }

    #[test]
    fn dual_parameter_stage_uses_parameter_rows_of_classical_gain() {
        let prev = ensemble(7, 5);
        let forecast = toy().propagate(&prev, 0, 3).unwrap();
        let batch = &schedule(1, 3)[0];
        let d = perturb_observations(batch, 7, 1);
        let staged = dual_parameter_stage(&forecast, &prev, batch, &d).unwrap();
        let classical = analysis(&VariantConfig::new(VariantKind::Classical), &forecast, batch, &d).unwrap();
        for (s, c) in staged.members.iter().zip(&classical.members) {
            assert_eq!(s.params.values, c.params.values);
        }
        for (s, p) in staged.members.iter().zip(&prev.members) {
            assert_eq!(s.state, p.state);
        }
    }

    #[test]
    fn dual_with_exact_data_equals_resimulated_forecast() {
        // Identical members: zero spread gives a zero gain in both stages.
        let grid = Grid2D::new(3, 2, 1.0, 1.0).unwrap();
        let member = AugmentedState {
            params: LogPermField::constant(grid, -12.0),
            state: DynamicState { head: vec![10.0; 6], conc: None },
        };
        let ens = Ensemble::new(vec![member; 4]).unwrap();
        let batches = schedule(3, 2);
        let out = run_variant(&VariantConfig::new(VariantKind::Dual), &toy(), ens.clone(), &batches, 1).unwrap();
        let plain = toy().propagate(&ens, 0, 6).unwrap();
        assert_eq!(out.ensemble, plain);
    }

    #[test]
    fn iterative_restarts_from_initial_states() {
        let grid = Grid2D::new(3, 2, 1.0, 1.0).unwrap();
        let member = AugmentedState {
            params: LogPermField::constant(grid, -11.0),
            state: DynamicState { head: vec![10.0; 6], conc: None },
        };
        let ens = Ensemble::new(vec![member; 3]).unwrap();
        let out = run_variant(&VariantConfig::new(VariantKind::Iterative), &toy(), ens, &schedule(4, 5), 1).unwrap();
        // Last restart simulated 20 steps from head 10 with K = -11.
        assert!((out.ensemble.members[0].state.head[0] - (10.0 + 0.01 * 20.0)).abs() < 1e-12);
        assert!(out.ensemble.members[0].params.values.iter().all(|v| *v == -11.0));
    }

    #[test]
    fn failures_keep_last_valid_ensemble() {
        struct Failing;
        impl Propagator for Failing {
            fn propagate(&self, e: &Ensemble, from: usize, _n: usize) -> Result<Ensemble> {
                if from >= 3 {
                    Err(Error::SolverDivergence { iterations: 500, residual: 1.0 })
                } else {
                    Ok(e.clone())
                }
            }
            fn restart(&self, e: &Ensemble) -> Ensemble {
                e.clone()
            }
        }
        let out = run_variant(&VariantConfig::new(VariantKind::Classical), &Failing, ensemble(5, 2), &schedule(3, 3), 1).unwrap();
        assert!(out.failure.unwrap().contains("500"));
        assert_eq!(out.forward_steps, 6);
    }

    #[test]
    fn config_validation_and_ids() {
        assert!(VariantConfig { alpha: 0.0, ..VariantConfig::new(VariantKind::Damped) }.validate().is_err());
        assert!(VariantConfig { beta: 2.0, ..VariantConfig::new(VariantKind::Hybrid) }.validate().is_err());
        assert!(VariantConfig { lambda: -1.0, ..VariantConfig::new(VariantKind::Local) }.validate().is_err());
        assert_eq!(VariantConfig::new(VariantKind::NormalScore).id(), "normal_score");
        assert_eq!(VariantKind::parse("iterative").unwrap(), VariantKind::Iterative);
        assert!(VariantKind::parse("kalman").is_err());
        let c: VariantConfig = toml::from_str("kind = \"local\"\nlambda = 25.0\nlabel = \"local(lambda=25)\"").unwrap();
        assert_eq!(c.id(), "local(lambda=25)");
        assert!(toml::from_str::<VariantConfig>("kind = \"local\"\nlamda = 25.0").is_err());
    }
}
