//! TOML run configuration.
//!
//! ```toml
//! workers = 4
//!
//! [plan]
//! scenario = "tracer"
//! ensemble_sizes = [50]
//! n_experiments = 100
//!
//! [[plan.variants]]
//! kind = "hybrid"
//! beta = 0.5
//!
//! [output]
//! dir = "results"
//! table = "tracer.csv"
//!
//! # Any field of the scenario definition can be overridden here.
//! [scenario]
//! n_obs_times = 50
//! [scenario.rock]
//! specific_storage = 2e-5
//! ```
//!
//! Every omitted value falls back to the built-in scenario and plan
//! defaults, so an empty `[plan]` section reproduces the standard set-up.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::ExperimentPlan;
use crate::scenario::{build_scenario, ScenarioSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Output directory; the caller's default root when absent.
    pub dir: Option<PathBuf>,
    /// File name of the RMSE table inside `dir`.
    pub table: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: None, table: "rmse.csv".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub workers: Option<usize>,
    pub plan: ExperimentPlan,
    pub output: OutputConfig,
    /// Partial scenario definition merged over the built-in one.
    pub scenario: toml::Table,
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of the first `key = ...` assignment in `text`.
fn line_of_key(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

/// First back-quoted name in a serde message, e.g. the unknown field.
fn quoted_name(message: &str) -> Option<&str> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(&message[start..start + len])
}

fn config_error(text: &str, message: String, span: Option<std::ops::Range<usize>>) -> Error {
    let line = span
        .map(|s| line_of_offset(text, s.start))
        .or_else(|| quoted_name(&message).and_then(|k| line_of_key(text, k)));
    Error::Config { message, line }
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl RunConfig {
    /// Parses and validates `text`, including the scenario overrides.
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| config_error(text, e.message().to_string(), e.span()))?;
        config.scenario_spec().map_err(|e| match e {
            Error::Config { message, line: None } => config_error(text, message, None),
            other => other,
        })?;
        config.plan.validate().map_err(|e| config_error(text, e.to_string(), None))?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config { message, line } => Error::Config { message: format!("{}: {message}", path.display()), line },
            other => other,
        })
    }

    /// Built-in scenario of the plan with the overrides applied.
    pub fn scenario_spec(&self) -> Result<ScenarioSpec> {
        let base = build_scenario(self.plan.scenario);
        if self.scenario.is_empty() {
            return Ok(base);
        }
        let mut table = toml::Table::try_from(&base).map_err(|e| Error::invalid(format!("scenario serialization: {e}")))?;
        merge(&mut table, &self.scenario);
        let spec: ScenarioSpec = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config { message: format!("scenario override: {}", e.message()), line: None })?;
        if spec.name != self.plan.scenario {
            return Err(Error::Config { message: "scenario.name must match plan.scenario".into(), line: None });
        }
        spec.validate().map_err(|e| Error::Config { message: format!("scenario override: {e}"), line: None })?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("config serialization: {e}")))
    }
}
