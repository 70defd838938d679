//! Batches of paired synthetic experiments and their RMSE tables.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{child_seed, Purpose};
use crate::scenario::{Scenario, ScenarioName, ScenarioSpec, SyntheticTruth};
use crate::variants::{run_variant, VariantConfig, VariantKind};

/// `sqrt(mean((a - b)^2))` over all cells.
pub fn compute_rmse(mean_field: &[f64], truth: &[f64]) -> Result<f64> {
    if mean_field.len() != truth.len() {
        return Err(Error::ShapeMismatch { expected: truth.len(), found: mean_field.len() });
    }
    if truth.is_empty() {
        return Err(Error::Empty("rmse of an empty field"));
    }
    let ss: f64 = mean_field.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / truth.len() as f64).sqrt())
}

/// Parameter lists that expand each matching variant into one labelled
/// variant per value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweeps {
    /// Localization lengths for `local` variants, m.
    pub lambda: Vec<f64>,
    /// Ensemble weights for `hybrid` variants.
    pub beta: Vec<f64>,
    /// Observation-noise multipliers applied to every variant.
    pub noise_scale: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub scenario: ScenarioName,
    pub variants: Vec<VariantConfig>,
    pub ensemble_sizes: Vec<usize>,
    pub n_experiments: usize,
    /// Seed of the reference field; the scenario default when absent.
    pub truth_seed: Option<u64>,
    /// Experiment `i` uses a seed derived from `(base_seed, i)`.
    pub base_seed: u64,
    pub sweeps: Sweeps,
    /// Share experiment seeds across variants. When false every variant
    /// draws its own initial fields and perturbations.
    pub paired: bool,
    /// Store measured run times in the `wall_s` column; otherwise it is 0 so
    /// that tables are reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            scenario: ScenarioName::Tracer,
            variants: VariantKind::ALL.iter().map(|k| VariantConfig::new(*k)).collect(),
            ensemble_sizes: vec![50],
            n_experiments: 100,
            truth_seed: None,
            base_seed: 0,
            sweeps: Sweeps::default(),
            paired: true,
            record_wall_time: false,
        }
    }
}

fn fmt_value(v: f64) -> String {
    format!("{v}")
}

impl ExperimentPlan {
    pub fn truth_seed(&self) -> u64 {
        self.truth_seed.unwrap_or_else(|| self.scenario.default_truth_seed())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_experiments == 0 {
            return Err(Error::invalid("n_experiments must be at least 1"));
        }
        if self.variants.is_empty() {
            return Err(Error::invalid("the plan lists no variants"));
        }
        if self.ensemble_sizes.is_empty() || self.ensemble_sizes.iter().any(|n| *n < 2) {
            return Err(Error::invalid("ensemble sizes must be given and at least 2"));
        }
        let mut seen = HashSet::new();
        for n in &self.ensemble_sizes {
            if !seen.insert(*n) {
                return Err(Error::invalid(format!("ensemble size {n} listed twice")));
            }
        }
        let variants = self.expanded_variants();
        let mut ids = HashSet::new();
        for v in &variants {
            v.validate()?;
            if !ids.insert(v.id()) {
                return Err(Error::invalid(format!("variant id `{}` appears twice; give one a label", v.id())));
            }
        }
        Ok(())
    }

    /// Variants after applying the sweeps, in plan order.
    pub fn expanded_variants(&self) -> Vec<VariantConfig> {
        let mut out = Vec::new();
        for v in &self.variants {
            let mut base: Vec<(VariantConfig, Vec<String>)> = match v.kind {
                VariantKind::Local if !self.sweeps.lambda.is_empty() => self
                    .sweeps
                    .lambda
                    .iter()
                    .map(|l| (VariantConfig { lambda: *l, ..v.clone() }, vec![format!("lambda={}", fmt_value(*l))]))
                    .collect(),
                VariantKind::Hybrid if !self.sweeps.beta.is_empty() => self
                    .sweeps
                    .beta
                    .iter()
                    .map(|b| (VariantConfig { beta: *b, ..v.clone() }, vec![format!("beta={}", fmt_value(*b))]))
                    .collect(),
                _ => vec![(v.clone(), Vec::new())],
            };
            if !self.sweeps.noise_scale.is_empty() {
                base = base
                    .into_iter()
                    .flat_map(|(c, tags)| {
                        self.sweeps.noise_scale.iter().map(move |s| {
                            let mut t = tags.clone();
                            t.push(format!("noise={}", fmt_value(*s)));
                            (VariantConfig { noise_scale: *s, ..c.clone() }, t)
                        })
                    })
                    .collect();
            }
            for (mut c, tags) in base {
                if !tags.is_empty() {
                    c.label = Some(format!("{}({})", v.id(), tags.join(",")));
                }
                out.push(c);
            }
        }
        out
    }

    /// Seed of experiment `experiment` for the variant at `variant_index`.
    pub fn experiment_seed(&self, variant_index: usize, experiment: usize) -> u64 {
        let base = if self.paired {
            self.base_seed
        } else {
            child_seed(self.base_seed, variant_index as u64 + 1, Purpose::ExperimentSeed)
        };
        child_seed(base, experiment as u64, Purpose::ExperimentSeed)
    }

    /// Hex SHA-256 of the plan together with the scenario it runs on.
    pub fn hash(&self, spec: &ScenarioSpec) -> String {
        #[derive(Serialize)]
        struct Hashed<'a> {
            plan: &'a ExperimentPlan,
            scenario: &'a ScenarioSpec,
        }
        let json = serde_json::to_vec(&Hashed { plan: self, scenario: spec }).expect("plan serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseRecord {
    pub scenario: String,
    pub variant: String,
    pub n_e: usize,
    pub experiment: usize,
    /// RMSE of the ensemble-mean log10 K field, of the last valid ensemble
    /// when the run diverged.
    pub rmse: f64,
    /// Ensemble forward steps spent.
    pub steps: usize,
    pub wall_s: f64,
    pub diverged: bool,
}

impl RmseRecord {
    pub fn key(&self) -> (String, usize, usize) {
        (self.variant.clone(), self.n_e, self.experiment)
    }
}

/// One synthetic experiment: initial ensemble, assimilation of every batch
/// of `truth`, and the final RMSE.
pub fn run_experiment(
    scenario: &Scenario,
    truth: &SyntheticTruth,
    variant: &VariantConfig,
    n_e: usize,
    experiment: usize,
    experiment_seed: u64,
) -> Result<RmseRecord> {
    let start = Instant::now();
    let initial = scenario.initial_ensemble(n_e, experiment_seed)?;
    let outcome = run_variant(variant, scenario, initial, &truth.batches, experiment_seed)?;
    let rmse = compute_rmse(&outcome.ensemble.mean_params(), &truth.field.values)?;
    Ok(RmseRecord {
        scenario: scenario.spec.name.to_string(),
        variant: variant.id(),
        n_e,
        experiment,
        rmse,
        steps: outcome.forward_steps,
        wall_s: start.elapsed().as_secs_f64(),
        diverged: outcome.failure.is_some() || !rmse.is_finite(),
    })
}

/// RMSE of the initial ensemble-mean field against the truth.
pub fn initial_rmse(scenario: &Scenario, truth: &SyntheticTruth, n_e: usize, experiment_seed: u64) -> Result<f64> {
    let ens = scenario.initial_ensemble(n_e, experiment_seed)?;
    compute_rmse(&ens.mean_params(), &truth.field.values)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RmseTable {
    pub records: Vec<RmseRecord>,
}

impl RmseTable {
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let records = reader.deserialize().collect::<std::result::Result<Vec<RmseRecord>, _>>()?;
        Ok(RmseTable { records })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Variant ids in order of first appearance.
    pub fn variants(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.records.iter().filter(|r| seen.insert(r.variant.clone())).map(|r| r.variant.clone()).collect()
    }

    /// Ensemble sizes in ascending order.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.records.iter().map(|r| r.n_e).collect::<HashSet<_>>().into_iter().collect();
        s.sort_unstable();
        s
    }

    /// Records of one `(variant, n_e)` cell ordered by experiment index.
    pub fn cell(&self, variant: &str, n_e: usize) -> Vec<&RmseRecord> {
        let mut v: Vec<&RmseRecord> = self.records.iter().filter(|r| r.variant == variant && r.n_e == n_e).collect();
        v.sort_by_key(|r| r.experiment);
        v
    }

    /// RMSE samples of one cell ordered by experiment index.
    pub fn distribution(&self, variant: &str, n_e: usize) -> Vec<f64> {
        self.cell(variant, n_e).iter().map(|r| r.rmse).collect()
    }

    /// `(variant, n_e, experiment)` triples that some variant has at an
    /// ensemble size but another lacks.
    pub fn missing_pairs(&self) -> Vec<(String, usize, usize)> {
        let variants = self.variants();
        let mut missing = Vec::new();
        for n_e in self.sizes() {
            let per_variant: Vec<HashSet<usize>> = variants
                .iter()
                .map(|v| self.cell(v, n_e).iter().map(|r| r.experiment).collect())
                .collect();
            let all: HashSet<usize> = per_variant.iter().flatten().copied().collect();
            let mut all: Vec<usize> = all.into_iter().collect();
            all.sort_unstable();
            for (v, have) in variants.iter().zip(&per_variant) {
                for e in &all {
                    if !have.contains(e) {
                        missing.push((v.clone(), n_e, *e));
                    }
                }
            }
        }
        missing
    }
}

/// Provenance written next to each result table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub plan_hash: String,
    pub scenario: String,
    pub truth_seed: u64,
    pub base_seed: u64,
    pub version: String,
    pub n_records: usize,
    pub plan: ExperimentPlan,
}

pub fn manifest_path(table: &Path) -> PathBuf {
    let stem = table.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "table".into());
    table.with_file_name(format!("{stem}.manifest.json"))
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::file(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Worker threads; 0 uses all available cores.
    pub workers: usize,
    /// Keep the records already in the output table and run only the rest.
    pub resume: bool,
    /// Print one line per finished experiment to stderr.
    pub progress: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { workers: 1, resume: false, progress: false }
    }
}

/// Summary of a finished [`run_plan`] call.
#[derive(Clone, Debug)]
pub struct PlanRun {
    pub table: RmseTable,
    pub computed: usize,
    pub skipped: usize,
    pub plan_hash: String,
}

struct Job {
    variant_index: usize,
    size_index: usize,
    experiment: usize,
}

/// Executes every `(variant, n_e, experiment)` of `plan` and writes the table
/// to `out` (plus `<stem>.manifest.json`).
///
/// Finished records are appended to `out` as they arrive, so an interrupted
/// run can continue with `resume`. When all jobs are done the file is
/// rewritten in plan order.
pub fn run_plan(plan: &ExperimentPlan, spec: &ScenarioSpec, out: &Path, options: &RunOptions) -> Result<PlanRun> {
    plan.validate()?;
    if spec.name != plan.scenario {
        return Err(Error::invalid(format!("plan is for {} but the scenario is {}", plan.scenario, spec.name)));
    }
    let plan_hash = plan.hash(spec);
    let manifest = Manifest {
        plan_hash: plan_hash.clone(),
        scenario: spec.name.to_string(),
        truth_seed: plan.truth_seed(),
        base_seed: plan.base_seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        n_records: 0,
        plan: plan.clone(),
    };
    let mpath = manifest_path(out);

    let mut existing = Vec::new();
    if out.exists() {
        if !options.resume {
            return Err(Error::invalid(format!("{} already exists; resume it or choose another output", out.display())));
        }
        if mpath.exists() {
            let old = Manifest::read(&mpath)?;
            if old.plan_hash != plan_hash {
                return Err(Error::MixedPlans(old.plan_hash, plan_hash));
            }
        }
        existing = RmseTable::read_csv(out)?.records;
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    manifest.write(&mpath)?;

    let variants = plan.expanded_variants();
    let done: HashSet<(String, usize, usize)> = existing.iter().map(RmseRecord::key).collect();
    let mut jobs = Vec::new();
    for (vi, v) in variants.iter().enumerate() {
        for (si, n_e) in plan.ensemble_sizes.iter().enumerate() {
            for e in 0..plan.n_experiments {
                if !done.contains(&(v.id(), *n_e, e)) {
                    jobs.push(Job { variant_index: vi, size_index: si, experiment: e });
                }
            }
        }
    }
    let skipped = done.len();
    let computed = jobs.len();

    if !jobs.is_empty() {
        let scenario = Scenario::new(spec.clone())?;
        let truth = scenario.generate_truth(plan.truth_seed())?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.workers)
            .build()
            .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;

        let file = OpenOptions::new().create(true).append(true).open(out).map_err(|e| Error::file(out, e))?;
        let write_header = file.metadata().map_err(|e| Error::file(out, e))?.len() == 0;
        let (tx, rx) = mpsc::channel::<RmseRecord>();
        let progress = options.progress;
        let total = computed;
        let writer = std::thread::spawn(move || -> Result<()> {
            let mut w = csv::WriterBuilder::new().has_headers(write_header).from_writer(file);
            for (k, rec) in rx.into_iter().enumerate() {
                w.serialize(&rec)?;
                w.flush()?;
                if progress {
                    eprintln!(
                        "[{}/{}] {} n_e={} experiment={} rmse={:.4}{}",
                        k + 1,
                        total,
                        rec.variant,
                        rec.n_e,
                        rec.experiment,
                        rec.rmse,
                        if rec.diverged { " (diverged)" } else { "" }
                    );
                }
            }
            Ok(())
        });

        let result: Result<()> = pool.install(|| {
            jobs.par_iter().try_for_each_with(tx, |tx, job| {
                let v = &variants[job.variant_index];
                let n_e = plan.ensemble_sizes[job.size_index];
                let seed = plan.experiment_seed(job.variant_index, job.experiment);
                let mut rec = run_experiment(&scenario, &truth, v, n_e, job.experiment, seed)?;
                if !plan.record_wall_time {
                    rec.wall_s = 0.0;
                }
                tx.send(rec).map_err(|_| Error::invalid("result writer stopped"))
            })
        });
        let written = writer.join().map_err(|_| Error::invalid("result writer panicked"))?;
        result?;
        written?;
    }

    // Rewrite in plan order.
    let mut table = RmseTable::read_csv(out)?;
    let vorder: HashMap<String, usize> = variants.iter().enumerate().map(|(i, v)| (v.id(), i)).collect();
    let sorder: HashMap<usize, usize> = plan.ensemble_sizes.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    table.records.sort_by_key(|r| {
        (vorder.get(&r.variant).copied().unwrap_or(usize::MAX), sorder.get(&r.n_e).copied().unwrap_or(usize::MAX), r.experiment)
    });
    table.records.dedup_by(|a, b| a.key() == b.key());
    let tmp = out.with_extension("csv.tmp");
    table.write_csv(&tmp)?;
    fs::rename(&tmp, out).map_err(|e| Error::file(out, e))?;
    Manifest { n_records: table.records.len(), ..manifest }.write(&mpath)?;
    Ok(PlanRun { table, computed, skipped, plan_hash })
}
