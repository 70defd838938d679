//! The tracer and well set-ups, their synthetic truth and initial ensembles.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::enkf::{AugmentedState, Ensemble, MeasurementBatch, ObsKind, ObsSite};
use crate::error::{Error, Result};
use crate::forward::{
    BoundarySpec, DynamicState, EdgeCondition, FixedCell, FluidProps, ForwardModel, RockProps, SolverSettings,
};
use crate::grid::{CorrelationModel, FieldSampler, FieldStats, Grid2D, LogPermField};
use crate::rng::Purpose;
use crate::variants::Propagator;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioName {
    Tracer,
    Well,
}

impl ScenarioName {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioName::Tracer => "tracer",
            ScenarioName::Well => "well",
        }
    }

    /// Seed of the fixed reference field used when a plan does not name one.
    pub fn default_truth_seed(self) -> u64 {
        match self {
            ScenarioName::Tracer => TRACER_TRUTH_SEED,
            ScenarioName::Well => WELL_TRUTH_SEED,
        }
    }
}

impl std::str::FromStr for ScenarioName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tracer" => Ok(ScenarioName::Tracer),
            "well" => Ok(ScenarioName::Well),
            other => Err(Error::UnknownScenario(other.to_string())),
        }
    }
}

impl std::fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

const TRACER_TRUTH_SEED: u64 = 9;
const WELL_TRUTH_SEED: u64 = 1;

/// Complete definition of one experimental set-up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: ScenarioName,
    pub grid: Grid2D,
    /// Simulated time, s.
    pub sim_time: f64,
    pub n_steps: usize,
    pub fluid: FluidProps,
    pub rock: RockProps,
    pub head_bc: BoundarySpec,
    /// Present for the tracer model only.
    pub conc_bc: Option<BoundarySpec>,
    /// Uniform initial head before boundary values are imposed, m.
    pub initial_head: f64,
    /// Uniform initial concentration before boundary values are imposed, mol/l.
    pub initial_conc: Option<f64>,
    /// Molecular diffusion coefficient, m^2/s.
    pub diffusion: f64,
    pub observers: Vec<ObsSite>,
    /// Steps between assimilation times.
    pub obs_interval: usize,
    pub n_obs_times: usize,
    /// Observation noise standard deviation for heads, m.
    pub noise_head: f64,
    /// Observation noise standard deviation for concentrations, mol/l.
    pub noise_conc: f64,
    pub reference: FieldStats,
    pub ensemble: FieldStats,
    pub solver: SolverSettings,
}

impl ScenarioSpec {
    pub fn dt(&self) -> f64 {
        self.sim_time / self.n_steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.fluid.validate()?;
        self.rock.validate()?;
        self.solver.validate()?;
        self.reference.validate()?;
        self.ensemble.validate()?;
        self.head_bc.validate(&self.grid)?;
        if !(self.sim_time > 0.0 && self.sim_time.is_finite()) || self.n_steps == 0 {
            return Err(Error::invalid("sim_time and n_steps must be positive"));
        }
        if self.obs_interval == 0 || self.n_obs_times == 0 {
            return Err(Error::invalid("obs_interval and n_obs_times must be positive"));
        }
        if self.obs_interval * self.n_obs_times > self.n_steps {
            return Err(Error::invalid(format!(
                "{} observation times every {} steps exceed the {} simulated steps",
                self.n_obs_times, self.obs_interval, self.n_steps
            )));
        }
        if self.conc_bc.is_some() != self.initial_conc.is_some() {
            return Err(Error::invalid("conc_bc and initial_conc must be given together"));
        }
        if let Some(bc) = &self.conc_bc {
            bc.validate(&self.grid)?;
        }
        if !(self.diffusion >= 0.0 && self.diffusion.is_finite()) {
            return Err(Error::invalid("diffusion must be non-negative"));
        }
        if self.observers.is_empty() {
            return Err(Error::invalid("at least one observer is required"));
        }
        for site in &self.observers {
            if site.cell >= self.grid.n_cells() {
                return Err(Error::invalid(format!("observer cell {} outside the grid", site.cell)));
            }
            if site.kind == ObsKind::Concentration && self.conc_bc.is_none() {
                return Err(Error::invalid("concentration observer in a model without transport"));
            }
        }
        if !(self.noise_head > 0.0 && self.noise_conc > 0.0) {
            return Err(Error::invalid("observation noise must be positive"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the definition's JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn forward_model(&self) -> ForwardModel {
        ForwardModel {
            grid: self.grid,
            fluid: self.fluid,
            rock: self.rock,
            head_bc: self.head_bc.clone(),
            conc_bc: self.conc_bc.clone(),
            diffusion: self.diffusion,
            dt: self.dt(),
            settings: self.solver,
        }
    }

    pub fn initial_state(&self) -> DynamicState {
        let n = self.grid.n_cells();
        let mut head = vec![self.initial_head; n];
        self.head_bc.apply(&self.grid, &mut head);
        let conc = match (&self.conc_bc, self.initial_conc) {
            (Some(bc), Some(c0)) => {
                let mut c = vec![c0; n];
                bc.apply(&self.grid, &mut c);
                Some(c)
            }
            _ => None,
        };
        DynamicState { head, conc }
    }

    /// Forward steps at which observations are taken.
    pub fn obs_steps(&self) -> Vec<usize> {
        (1..=self.n_obs_times).map(|k| k * self.obs_interval).collect()
    }

    pub fn noise_std(&self, kind: ObsKind) -> f64 {
        match kind {
            ObsKind::Head => self.noise_head,
            ObsKind::Concentration => self.noise_conc,
        }
    }
}

/// The constant set-up for `name`.
pub fn build_scenario(name: ScenarioName) -> ScenarioSpec {
    match name {
        ScenarioName::Tracer => tracer(),
        ScenarioName::Well => well(),
    }
}

const DAY: f64 = 86_400.0;

fn tracer() -> ScenarioSpec {
    let grid = Grid2D { nx: 31, ny: 31, dx: 2.0, dy: 2.0 };
    let observers = [(19.0, 31.0), (43.0, 31.0)]
        .into_iter()
        .map(|(x, y)| ObsSite { cell: grid.cell_containing(x, y).expect("observer inside grid"), kind: ObsKind::Concentration })
        .collect();
    let dirichlet = |value| EdgeCondition::Dirichlet { value };
    ScenarioSpec {
        name: ScenarioName::Tracer,
        grid,
        sim_time: 1200.0 * DAY,
        n_steps: 200,
        fluid: FluidProps::default(),
        rock: RockProps { porosity: 0.1, specific_storage: 1e-5 },
        head_bc: BoundarySpec {
            south: dirichlet(11.0),
            north: dirichlet(10.0),
            west: EdgeCondition::NoFlow,
            east: EdgeCondition::NoFlow,
            fixed_cells: Vec::new(),
        },
        conc_bc: Some(BoundarySpec {
            south: dirichlet(80e-3),
            north: dirichlet(60e-3),
            west: EdgeCondition::NoFlow,
            east: EdgeCondition::NoFlow,
            fixed_cells: Vec::new(),
        }),
        initial_head: 10.0,
        initial_conc: Some(60e-3),
        diffusion: 1.5e-9,
        observers,
        obs_interval: 2,
        n_obs_times: 100,
        noise_head: 5e-2,
        noise_conc: 7.1e-3,
        reference: FieldStats { mean: -12.0, stddev: 0.5, corr_length: 50.0, model: CorrelationModel::Spherical },
        ensemble: FieldStats { mean: -12.5, stddev: 0.5, corr_length: 50.0, model: CorrelationModel::Spherical },
        solver: SolverSettings::default(),
    }
}

/// Lattice indices of the well observers along each axis.
pub const WELL_LATTICE: [usize; 7] = [3, 7, 11, 15, 19, 23, 27];

fn well() -> ScenarioSpec {
    let grid = Grid2D { nx: 31, ny: 31, dx: 20.0, dy: 20.0 };
    let well_cell = grid.cell_containing(310.0, 310.0).expect("well inside grid");
    let mut observers = Vec::with_capacity(48);
    for &j in &WELL_LATTICE {
        for &i in &WELL_LATTICE {
            let cell = grid.index(i, j);
            if cell != well_cell {
                observers.push(ObsSite { cell, kind: ObsKind::Head });
            }
        }
    }
    let mut head_bc = BoundarySpec::uniform(EdgeCondition::Dirichlet { value: 10.0 });
    head_bc.fixed_cells.push(FixedCell { cell: well_cell, value: 11.0 });
    ScenarioSpec {
        name: ScenarioName::Well,
        grid,
        sim_time: 18.0 * DAY,
        n_steps: 1200,
        fluid: FluidProps::default(),
        rock: RockProps { porosity: 0.1, specific_storage: 1e-5 },
        head_bc,
        conc_bc: None,
        initial_head: 10.0,
        initial_conc: None,
        diffusion: 0.0,
        observers,
        obs_interval: 20,
        n_obs_times: 60,
        noise_head: 5e-2,
        noise_conc: 7.1e-3,
        reference: FieldStats { mean: -12.0, stddev: 0.5, corr_length: 60.0, model: CorrelationModel::Spherical },
        ensemble: FieldStats { mean: -12.5, stddev: 0.5, corr_length: 60.0, model: CorrelationModel::Spherical },
        solver: SolverSettings::default(),
    }
}

/// Reference field and the clean observations it produces.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTruth {
    pub field: LogPermField,
    pub batches: Vec<MeasurementBatch>,
}

/// A validated scenario with its forward model and ensemble field sampler,
/// ready to generate truths and ensembles and to propagate them.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub model: ForwardModel,
    initial: DynamicState,
    ensemble_sampler: FieldSampler,
}

impl Scenario {
    pub fn new(spec: ScenarioSpec) -> Result<Self> {
        spec.validate()?;
        let ensemble_sampler = FieldSampler::new(spec.grid, spec.ensemble)?;
        Ok(Scenario { model: spec.forward_model(), initial: spec.initial_state(), ensemble_sampler, spec })
    }

    pub fn initial_state(&self) -> &DynamicState {
        &self.initial
    }

    pub fn reference_sampler(&self) -> Result<FieldSampler> {
        FieldSampler::new(self.spec.grid, self.spec.reference)
    }

    pub fn truth_field(&self, truth_seed: u64) -> Result<LogPermField> {
        Ok(self.reference_sampler()?.sample_keyed(truth_seed, 0, Purpose::TruthField))
    }

    /// Runs the forward model on `field` and extracts the scheduled
    /// observations without noise.
    pub fn observe(&self, field: &LogPermField) -> Result<Vec<MeasurementBatch>> {
        let steps = self.spec.obs_steps();
        let last = *steps.last().expect("at least one observation time");
        let mut state = self.initial.clone();
        let mut snapshots = Vec::with_capacity(steps.len());
        self.model.advance_with(&mut state, field, 0, last, |step, s| {
            if step % self.spec.obs_interval == 0 {
                snapshots.push(s.clone());
            }
        })?;
        let batches = steps
            .iter()
            .zip(snapshots)
            .enumerate()
            .map(|(k, (&step, s))| MeasurementBatch {
                time_index: k + 1,
                step,
                sites: self.spec.observers.clone(),
                values: self.spec.observers.iter().map(|site| read_site(&s, site)).collect(),
                noise_std: self.spec.observers.iter().map(|site| self.spec.noise_std(site.kind)).collect(),
            })
            .collect();
        Ok(batches)
    }

    pub fn generate_truth(&self, truth_seed: u64) -> Result<SyntheticTruth> {
        let field = self.truth_field(truth_seed)?;
        let batches = self.observe(&field)?;
        Ok(SyntheticTruth { field, batches })
    }

    /// `n_e` members with fields from the ensemble statistics, keyed by
    /// `(experiment_seed, member)`, and the initial dynamic states.
    pub fn initial_ensemble(&self, n_e: usize, experiment_seed: u64) -> Result<Ensemble> {
        let members = (0..n_e)
            .into_par_iter()
            .map(|i| AugmentedState {
                params: self.ensemble_sampler.sample_keyed(experiment_seed, i as u64, Purpose::InitialField),
                state: self.initial.clone(),
            })
            .collect();
        Ensemble::new(members)
    }
}

fn read_site(state: &DynamicState, site: &ObsSite) -> f64 {
    match site.kind {
        ObsKind::Head => state.head[site.cell],
        ObsKind::Concentration => state.conc.as_ref().expect("transport model")[site.cell],
    }
}

impl Propagator for Scenario {
    fn propagate(&self, ensemble: &Ensemble, from_step: usize, n_steps: usize) -> Result<Ensemble> {
        let members = ensemble
            .members
            .par_iter()
            .enumerate()
            .map(|(i, m)| {
                let mut state = m.state.clone();
                self.model
                    .advance_with(&mut state, &m.params, from_step, n_steps, |_, _| {})
                    .map_err(|e| match e {
                        Error::Forward { step, source, .. } => Error::Forward { step, member: Some(i), source },
                        other => other,
                    })?;
                Ok(AugmentedState { params: m.params.clone(), state })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Ensemble { members })
    }

    fn restart(&self, ensemble: &Ensemble) -> Ensemble {
        let mut out = ensemble.clone();
        for m in &mut out.members {
            m.state = self.initial.clone();
        }
        out
    }
}

pub fn generate_truth(spec: &ScenarioSpec, truth_seed: u64) -> Result<SyntheticTruth> {
    Scenario::new(spec.clone())?.generate_truth(truth_seed)
}

pub fn initial_ensemble(spec: &ScenarioSpec, n_e: usize, experiment_seed: u64) -> Result<Ensemble> {
    Scenario::new(spec.clone())?.initial_ensemble(n_e, experiment_seed)
}
