//! `gwenkf`: run assimilation experiment plans, analyse their RMSE tables and
//! dump reference forward runs.
//!
//! Exit status is 0 on success, 2 for configuration errors (including bad
//! command-line usage) and 1 for any other failure.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use gwenkf_core::config::RunConfig;
use gwenkf_core::harness::{manifest_path, run_plan, Manifest, RunOptions};
use gwenkf_core::io::{write_field_csv, write_observations_csv, write_trajectory_csv};
use gwenkf_core::scenario::{build_scenario, Scenario};
use gwenkf_core::stats::{write_reports, ReportOptions, DEFAULT_RESAMPLES};
use gwenkf_core::{Error, RmseRecord, RmseTable, ScenarioName, ScenarioSpec};

#[derive(Parser, Debug)]
#[command(name = "gwenkf", version, about = "Ensemble Kalman filter experiments on 2D groundwater models")]
struct Cli {
    /// Root directory for outputs whose location is not given explicitly.
    #[arg(long, env = "GWENKF_OUT", default_value = "results", global = true)]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Execute an experiment plan and write its RMSE table.
    Run(RunArgs),
    /// Resampling statistics and reports for one or more RMSE tables.
    Analyze(AnalyzeArgs),
    /// Generate a reference field and dump its forward run.
    Forward(ForwardArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; overrides the config, defaults to all cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Continue an interrupted run, keeping finished rows.
    #[arg(long)]
    resume: bool,
    /// Suppress per-experiment progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// RMSE tables written by `run`; repeat for several scenarios.
    #[arg(long, required = true, num_args = 1..)]
    table: Vec<PathBuf>,
    /// Synthetic-experiment subset sizes.
    #[arg(long, value_delimiter = ',', default_value = "1,10,100")]
    nsyn: Vec<usize>,
    /// Report directory; defaults to `<out-root>/analysis`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Accept tables of one scenario produced by different plans.
    #[arg(long)]
    force: bool,
    /// Resamples per probability estimate.
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    resamples: usize,
    /// Seed of the resampling streams.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Histogram bins for the subset-mean distributions.
    #[arg(long, default_value_t = 40)]
    bins: usize,
}

#[derive(Args, Debug)]
struct ForwardArgs {
    /// `tracer` or `well`; taken from the config when omitted.
    #[arg(long)]
    scenario: Option<ScenarioName>,
    /// Seed of the reference field; defaults to the scenario's truth seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `<out-root>/forward-<scenario>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run configuration whose `[scenario]` overrides are applied.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of evenly spaced state snapshots, first and last step included.
    #[arg(long, default_value_t = 5)]
    snapshots: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(&cli.out_root, args),
        Command::Analyze(args) => cmd_analyze(&cli.out_root, args),
        Command::Forward(args) => cmd_forward(&cli.out_root, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let config = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_config));
    if config {
        2
    } else {
        1
    }
}

fn cmd_run(out_root: &Path, args: &RunArgs) -> Result<()> {
    let config = RunConfig::load(&args.config)?;
    let spec = config.scenario_spec()?;
    let dir = config.output.dir.clone().unwrap_or_else(|| out_root.to_path_buf());
    let table = dir.join(&config.output.table);
    let workers = args
        .workers
        .or(config.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(Error::Config { message: "workers must be at least 1".into(), line: None }.into());
    }
    let options = RunOptions { workers, resume: args.resume, progress: !args.quiet };
    let run = run_plan(&config.plan, &spec, &table, &options).with_context(|| format!("running {}", table.display()))?;
    let diverged = run.table.records.iter().filter(|r| r.diverged).count();
    println!(
        "{}: {} records ({} computed, {} reused), plan {}",
        table.display(),
        run.table.records.len(),
        run.computed,
        run.skipped,
        run.plan_hash
    );
    if diverged > 0 {
        println!("{diverged} experiments diverged and are flagged in the table");
    }
    Ok(())
}

struct LoadedTable {
    path: PathBuf,
    plan_hash: Option<String>,
    table: RmseTable,
}

#[derive(Serialize)]
struct InputRecord {
    path: PathBuf,
    plan_hash: Option<String>,
    records: usize,
}

#[derive(Serialize)]
struct AnalysisManifest {
    version: String,
    inputs: Vec<InputRecord>,
    n_syn: Vec<usize>,
    n_resamples: usize,
    seed: u64,
    outputs: Vec<PathBuf>,
}

fn load_table(path: &Path) -> Result<LoadedTable> {
    let table = RmseTable::read_csv(path)?;
    let mpath = manifest_path(path);
    let plan_hash = if mpath.exists() { Some(Manifest::read(&mpath)?.plan_hash) } else { None };
    Ok(LoadedTable { path: path.to_path_buf(), plan_hash, table })
}

type RecordKey = (String, usize, usize);

/// Merges the records of every table per scenario, refusing tables of one
/// scenario that come from different plans unless `force` is set.
fn group_by_scenario(tables: &[LoadedTable], force: bool) -> Result<BTreeMap<String, RmseTable>> {
    let mut hashes: BTreeMap<String, String> = BTreeMap::new();
    let mut groups: BTreeMap<String, (HashSet<RecordKey>, Vec<RmseRecord>)> = BTreeMap::new();
    for t in tables {
        let scenarios: HashSet<&str> = t.table.records.iter().map(|r| r.scenario.as_str()).collect();
        for s in scenarios {
            if let Some(h) = &t.plan_hash {
                match hashes.get(s) {
                    Some(prev) if prev != h && !force => {
                        return Err(Error::MixedPlans(prev.clone(), h.clone()).into());
                    }
                    Some(_) => {}
                    None => {
                        hashes.insert(s.to_string(), h.clone());
                    }
                }
            }
        }
        for r in &t.table.records {
            let (seen, records) = groups.entry(r.scenario.clone()).or_default();
            if seen.insert(r.key()) {
                records.push(r.clone());
            }
        }
    }
    Ok(groups.into_iter().map(|(s, (_, records))| (s, RmseTable { records })).collect())
}

/// Stacks per-scenario threshold files into one, taking the union of their
/// columns in order of first appearance.
fn combine_thresholds(parts: &[PathBuf], out: &Path) -> Result<()> {
    let mut header: Vec<String> = Vec::new();
    let mut rows: Vec<BTreeMap<String, String>> = Vec::new();
    for p in parts {
        let mut reader = csv::Reader::from_path(p).with_context(|| format!("reading {}", p.display()))?;
        let names: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        for n in &names {
            if !header.contains(n) {
                header.push(n.clone());
            }
        }
        for rec in reader.records() {
            let rec = rec?;
            rows.push(names.iter().cloned().zip(rec.iter().map(str::to_string)).collect());
        }
    }
    let mut w = csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display()))?;
    w.write_record(&header)?;
    for row in &rows {
        w.write_record(header.iter().map(|h| row.get(h).map(String::as_str).unwrap_or("")))?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_analyze(out_root: &Path, args: &AnalyzeArgs) -> Result<()> {
    if args.nsyn.is_empty() || args.nsyn.contains(&0) {
        return Err(Error::Config { message: "--nsyn needs positive subset sizes".into(), line: None }.into());
    }
    let out = args.out.clone().unwrap_or_else(|| out_root.join("analysis"));
    let tables = args.table.iter().map(|p| load_table(p).with_context(|| format!("loading {}", p.display()))).collect::<Result<Vec<_>>>()?;
    let groups = group_by_scenario(&tables, args.force)?;
    if groups.is_empty() {
        bail!("the input tables contain no records");
    }
    let options = ReportOptions {
        n_syn: args.nsyn.clone(),
        n_resamples: args.resamples,
        seed: args.seed,
        histogram_bins: args.bins,
    };
    let mut outputs = Vec::new();
    if groups.len() == 1 {
        let (scenario, table) = groups.iter().next().expect("one group");
        outputs.extend(write_reports(table, &out, &options).with_context(|| format!("analysing {scenario}"))?);
    } else {
        let mut parts = Vec::new();
        for (scenario, table) in &groups {
            let dir = out.join(scenario);
            outputs.extend(write_reports(table, &dir, &options).with_context(|| format!("analysing {scenario}"))?);
            parts.push(dir.join("thresholds.csv"));
        }
        let combined = out.join("thresholds.csv");
        combine_thresholds(&parts, &combined)?;
        outputs.push(combined);
    }
    let manifest = AnalysisManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        inputs: tables
            .iter()
            .map(|t| InputRecord { path: t.path.clone(), plan_hash: t.plan_hash.clone(), records: t.table.records.len() })
            .collect(),
        n_syn: args.nsyn.clone(),
        n_resamples: args.resamples,
        seed: args.seed,
        outputs: outputs.clone(),
    };
    let mpath = out.join("analysis.manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)? + "\n").with_context(|| format!("writing {}", mpath.display()))?;
    for p in &outputs {
        println!("{}", p.display());
    }
    println!("{}", mpath.display());
    Ok(())
}

#[derive(Serialize)]
struct ForwardManifest {
    version: String,
    scenario: ScenarioName,
    seed: u64,
    scenario_hash: String,
    dt: f64,
    n_steps: usize,
    snapshot_steps: Vec<usize>,
    n_obs_times: usize,
    n_observers: usize,
}

fn forward_spec(args: &ForwardArgs) -> Result<ScenarioSpec> {
    match (&args.config, args.scenario) {
        (Some(path), scenario) => {
            let config = RunConfig::load(path)?;
            if let Some(s) = scenario.filter(|s| *s != config.plan.scenario) {
                return Err(Error::Config {
                    message: format!("--scenario {s} differs from the config's plan.scenario {}", config.plan.scenario),
                    line: None,
                }
                .into());
            }
            Ok(config.scenario_spec()?)
        }
        (None, Some(s)) => Ok(build_scenario(s)),
        (None, None) => Err(Error::Config { message: "forward needs --scenario or --config".into(), line: None }.into()),
    }
}

/// `count` steps spread evenly over `0..=n_steps`, both ends included.
fn snapshot_steps(n_steps: usize, count: usize) -> Vec<usize> {
    let mut steps: Vec<usize> = match count {
        0 => Vec::new(),
        1 => vec![n_steps],
        _ => (0..count).map(|k| (k * n_steps + (count - 1) / 2) / (count - 1)).collect(),
    };
    steps.dedup();
    steps
}

fn cmd_forward(out_root: &Path, args: &ForwardArgs) -> Result<()> {
    let spec = forward_spec(args)?;
    let seed = args.seed.unwrap_or_else(|| spec.name.default_truth_seed());
    let out = args.out.clone().unwrap_or_else(|| out_root.join(format!("forward-{}", spec.name)));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let scenario = Scenario::new(spec.clone())?;
    let field = scenario.truth_field(seed)?;
    let batches = scenario.observe(&field)?;
    let wanted = snapshot_steps(spec.n_steps, args.snapshots);
    let mut snapshots = Vec::with_capacity(wanted.len());
    let mut state = scenario.initial_state().clone();
    if wanted.first() == Some(&0) {
        snapshots.push((0, state.clone()));
    }
    scenario.model.advance_with(&mut state, &field, 0, spec.n_steps, |step, s| {
        if wanted.binary_search(&step).is_ok() {
            snapshots.push((step, s.clone()));
        }
    })?;

    write_field_csv(&out.join("reference_field.csv"), &field)?;
    write_observations_csv(&out.join("observations.csv"), &spec.grid, &batches)?;
    write_trajectory_csv(&out.join("trajectory.csv"), &snapshots)?;
    let manifest = ForwardManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        scenario: spec.name,
        seed,
        scenario_hash: spec.hash(),
        dt: spec.dt(),
        n_steps: spec.n_steps,
        snapshot_steps: wanted,
        n_obs_times: batches.len(),
        n_observers: batches.first().map_or(0, |b| b.values.len()),
    };
    let mpath = out.join("forward.manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)? + "\n").with_context(|| format!("writing {}", mpath.display()))?;
    println!("{}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshots_cover_both_ends() {
        assert_eq!(snapshot_steps(200, 5), vec![0, 50, 100, 150, 200]);
        assert_eq!(snapshot_steps(10, 1), vec![10]);
        assert_eq!(snapshot_steps(3, 10), vec![0, 1, 2, 3]);
        assert!(snapshot_steps(7, 0).is_empty());
    }

    #[test]
    fn config_errors_map_to_exit_code_two() {
        let e: anyhow::Error = Error::Config { message: "x".into(), line: Some(1) }.into();
        assert_eq!(exit_code(&e.context("loading")), 2);
        let e: anyhow::Error = Error::Empty("table").into();
        assert_eq!(exit_code(&e), 1);
    }

    #[test]
    fn command_line_shapes() {
        let cli = Cli::try_parse_from(["gwenkf", "analyze", "--table", "a.csv", "b.csv", "--nsyn", "1,10"]).unwrap();
        match cli.command {
            Command::Analyze(a) => {
                assert_eq!(a.table.len(), 2);
                assert_eq!(a.nsyn, vec![1, 10]);
            }
            other => panic!("parsed {other:?}"),
        }
        let cli = Cli::try_parse_from(["gwenkf", "forward", "--scenario", "well", "--seed", "4"]).unwrap();
        assert!(matches!(cli.command, Command::Forward(ForwardArgs { scenario: Some(ScenarioName::Well), seed: Some(4), .. })));
        assert!(Cli::try_parse_from(["gwenkf", "forward", "--scenario", "lake"]).is_err());
    }
}
