//! Experiment artifacts: manifest, summary and CSV tables.

use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::ExperimentConfig;
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub file: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(file: &str, header: impl IntoIterator<Item = String>) -> Self {
        Table {
            file: file.to_string(),
            header: header.into_iter().collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: impl IntoIterator<Item = f64>) {
        self.rows.push(row.into_iter().map(num).collect());
    }

    /// `t, mean, stderr` for a per-time Monte-Carlo trace.
    pub fn trace(file: &str, dt: f64, means: &[f64], stderrs: &[f64]) -> Self {
        let mut t = Table::new(file, ["t", "mean", "stderr"].map(String::from));
        for (k, (m, s)) in means.iter().zip(stderrs).enumerate() {
            t.push([k as f64 * dt, *m, *s]);
        }
        t
    }
}

/// Numbered column names `prefix_1..prefix_n`.
pub fn columns(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}_{i}"))
}

/// Shortest round-trip formatting, so outputs are byte-stable.
pub fn num(x: f64) -> String {
    format!("{x}")
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub checks: Vec<Check>,
    pub metrics: Map<String, Value>,
    pub tables: Vec<Table>,
}

impl Report {
    pub fn check(&mut self, name: &str, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.to_string(),
            pass,
            detail: detail.into(),
        });
    }

    pub fn metric(&mut self, name: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.metrics.insert(name.to_string(), v);
    }

    pub fn table(&mut self, t: Table) {
        self.tables.push(t);
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    experiment: &'a str,
    pass: bool,
    checks: &'a [Check],
    metrics: &'a Map<String, Value>,
}

/// Writes `manifest.json`, `summary.json` and every table under `dir`.
pub fn write_artifacts(dir: &Path, experiment: &str, manifest: &ExperimentConfig, report: &Report) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)? + "\n")?;
    let summary = Summary {
        experiment,
        pass: report.passed(),
        checks: &report.checks,
        metrics: &report.metrics,
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    for t in &report.tables {
        let mut w = csv::Writer::from_path(dir.join(&t.file))?;
        w.write_record(&t.header)?;
        for r in &t.rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    Ok(())
}
