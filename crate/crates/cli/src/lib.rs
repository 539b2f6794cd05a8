//! Experiment runner for `isosle-core`: config ingestion, orchestration, reports and plots.

pub mod config;
pub mod experiments;
pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use thiserror::Error;

pub use config::{Experiment, ExperimentConfig, Overrides};
pub use experiments::{run_experiment, Outcome, Table};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("unknown column: {0}")]
    UnknownColumn(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Numerical(_) => 3,
            Self::Validation(_) | Self::Io(_) | Self::UnknownColumn(_) => 2,
        }
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED_CHECK: i32 = 3;

/// Files written by one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub pass: bool,
    pub csv: Option<PathBuf>,
    pub json: PathBuf,
}

impl RunSummary {
    pub fn exit_code(&self) -> i32 {
        if self.pass { EXIT_OK } else { EXIT_FAILED_CHECK }
    }
}

fn io<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

/// `<experiment>-<seed>.<ext>` inside the output directory.
pub fn output_path(cfg: &ExperimentConfig, ext: &str) -> PathBuf {
    cfg.output_dir.join(format!("{}-{}.{ext}", cfg.experiment.file_stem(), cfg.seed()))
}

fn header(cfg: &ExperimentConfig, status: &str, message: Option<&str>) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("experiment".into(), json!(cfg.experiment));
    m.insert("seed".into(), json!(cfg.seed()));
    m.insert("status".into(), json!(status));
    if let Some(msg) = message {
        m.insert("message".into(), json!(msg));
    }
    m
}

fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(v).map_err(io(path))?;
    text.push('\n');
    fs::write(path, text).map_err(io(path))
}

pub fn write_csv(path: &Path, table: &Table) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(io(path))?;
    w.write_record(&table.header).map_err(io(path))?;
    for r in &table.rows {
        w.write_record(r).map_err(io(path))?;
    }
    w.flush().map_err(io(path))
}

/// Validates, runs and writes reports. A numerical failure still leaves a JSON report.
pub fn run_config(mut cfg: ExperimentConfig, overrides: &Overrides) -> Result<RunSummary, CliError> {
    cfg.apply(overrides);
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir).map_err(io(&cfg.output_dir))?;
    let json_path = output_path(&cfg, "json");
    let outcome = match run_experiment(&cfg) {
        Ok(o) => o,
        Err(e @ CliError::Numerical(_)) => {
            let mut m = header(&cfg, "fail", Some(&e.to_string()));
            m.insert("config".into(), serde_json::to_value(&cfg).unwrap_or(Value::Null));
            write_json(&json_path, &Value::Object(m))?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let csv_path = output_path(&cfg, "csv");
    write_csv(&csv_path, &outcome.table)?;
    let status = if outcome.pass { "pass" } else { "fail" };
    let mut m = header(&cfg, status, outcome.failure.as_deref());
    m.insert("result".into(), outcome.report);
    write_json(&json_path, &Value::Object(m))?;
    Ok(RunSummary { pass: outcome.pass, csv: Some(csv_path), json: json_path })
}

/// Loads a config file and runs it.
pub fn run_path(path: &Path, overrides: &Overrides) -> Result<RunSummary, CliError> {
    let cfg = ExperimentConfig::load(path)?;
    run_config(cfg, overrides)
}
