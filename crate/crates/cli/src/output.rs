//! Run records and file emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use hjlab::analysis::{fmt_num, SummaryEntry};
use serde::Serialize;

use crate::config::StageKind;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Passed,
    Failed,
    Skipped,
}

/// Manifest entry of one stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub name: String,
    pub kind: StageKind,
    pub status: StageStatus,
    pub wall_time: f64,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// The failed or skipped dependency that prevented this stage from
    /// running.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped_because: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub experiment: String,
    /// SHA-256 of the canonical TOML form of the configuration.
    pub config_hash: String,
    pub catalog: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn all_passed(&self) -> bool {
        self.stages.iter().all(|s| s.status == StageStatus::Passed)
    }

    pub fn record(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

/// Numbers of one stage: scalar metrics and per-`ε` entries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageSummary {
    pub name: String,
    pub status: StageStatus,
    pub metrics: BTreeMap<String, f64>,
    pub entries: Vec<SummaryEntry>,
}

impl StageSummary {
    pub fn new(name: &str, status: StageStatus) -> Self {
        Self { name: name.into(), status, metrics: BTreeMap::new(), entries: Vec::new() }
    }

    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }

    /// Per-`ε` values of one quantity, in sweep order.
    pub fn series(&self, quantity: &str) -> Vec<(f64, f64)> {
        self.entries
            .iter()
            .filter(|e| e.quantity == quantity)
            .filter_map(|e| e.epsilon.map(|eps| (eps, e.value)))
            .collect()
    }

    /// The aggregate entry of one quantity (no `ε`).
    pub fn aggregate(&self, quantity: &str) -> Option<&SummaryEntry> {
        self.entries.iter().find(|e| e.quantity == quantity && e.epsilon.is_none())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub experiment: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalization_constant: Option<f64>,
    pub stages: Vec<StageSummary>,
}

impl Summary {
    pub fn stage(&self, name: &str) -> Option<&StageSummary> {
        self.stages.iter().find(|s| s.name == name)
    }
}

/// Writes files under one directory and remembers their names.
#[derive(Debug)]
pub(crate) struct Sink {
    dir: PathBuf,
    plots: Vec<(String, String, bool)>,
}

impl Sink {
    pub(crate) fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), plots: Vec::new() })
    }

    pub(crate) fn write(&self, name: &str, contents: &str) -> Result<String, CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| io_error(&path, e))?;
        Ok(name.to_string())
    }

    /// Two-column `x y` data file, registered for the plot script.
    pub(crate) fn write_xy(
        &mut self,
        name: &str,
        title: &str,
        points: &[(f64, f64)],
        loglog: bool,
    ) -> Result<String, CliError> {
        let mut text = format!("# {title}\n");
        for (x, y) in points {
            text.push_str(&format!("{} {}\n", fmt_num(*x), fmt_num(*y)));
        }
        let file = self.write(name, &text)?;
        self.plots.push((file.clone(), title.to_string(), loglog));
        Ok(file)
    }

    /// Gnuplot script with one plot per data file.
    pub(crate) fn write_plot_script(&self) -> Result<Option<String>, CliError> {
        if self.plots.is_empty() {
            return Ok(None);
        }
        let mut text = String::from("# gnuplot -p plot.gp\nset key top left\n");
        for (file, title, loglog) in &self.plots {
            text.push_str(if *loglog { "set logscale xy\n" } else { "unset logscale\n" });
            text.push_str(&format!("plot '{file}' using 1:2 with linespoints title '{title}'\npause -1\n"));
        }
        self.write("plot.gp", &text).map(Some)
    }
}

pub(crate) fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io { path: path.display().to_string(), source }
}

/// CSV with a header row; every cell at 17 significant digits.
pub(crate) fn csv(columns: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = columns.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| fmt_num(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}
