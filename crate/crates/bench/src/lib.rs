//! Shared fixtures for the benchmarks: a scenario with its synthetic truth,
//! an initial ensemble and the perturbed first observation batch.

use gwenkf_core::enkf::perturb_observations;
use gwenkf_core::scenario::{build_scenario, Scenario};
use gwenkf_core::{Ensemble, MeasurementBatch, PerturbedObservations, ScenarioName, SyntheticTruth};

pub struct Fixture {
    pub scenario: Scenario,
    pub truth: SyntheticTruth,
    pub ensemble: Ensemble,
    pub batch: MeasurementBatch,
    pub perturbed: PerturbedObservations,
}

impl Fixture {
    /// Panics if the built-in scenario cannot be constructed.
    pub fn new(name: ScenarioName, n_e: usize) -> Self {
        let scenario = Scenario::new(build_scenario(name)).expect("built-in scenario is valid");
        let truth = scenario.generate_truth(name.default_truth_seed()).expect("truth run");
        let ensemble = scenario.initial_ensemble(n_e, 0).expect("initial ensemble");
        let batch = truth.batches[0].clone();
        let perturbed = perturb_observations(&batch, n_e, 0);
        Fixture { scenario, truth, ensemble, batch, perturbed }
    }
}
