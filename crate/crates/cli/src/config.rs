//! Experiment configuration: one TOML document describing the grid, the
//! problem family, an ordered list of stages and the outputs.

use std::collections::HashSet;
use std::path::PathBuf;

use hjlab::problem::DEFAULT_GRADIENT_BOUND;
use hjlab::{CouplingMatrix, DiffusionSpec, HamiltonianSpec, PeriodicGrid, ProblemSpec, Profile};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub grid: GridConfig,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(rename = "stage")]
    pub stages: Vec<StageConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default = "default_gradient_bound")]
    pub gradient_bound: f64,
    /// Shift the Hamiltonians so that the unregularized ergodic constant is
    /// zero before any stage runs.
    #[serde(default)]
    pub normalize: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling: Option<Vec<Vec<f64>>>,
    pub diffusion: DiffusionSpec,
    pub hamiltonians: Vec<HamiltonianSpec>,
}

fn default_gradient_bound() -> f64 {
    DEFAULT_GRADIENT_BOUND
}

impl ProblemConfig {
    /// The problem family at `ε = 1`; stages set their own `ε` and `η = ε⁴`.
    pub fn family(&self) -> Result<ProblemSpec, CliError> {
        let spec = match &self.coupling {
            None => {
                let [h] = self.hamiltonians.as_slice() else {
                    return Err(CliError::invalid(
                        "problem.coupling",
                        format!("{} hamiltonians need a coupling matrix", self.hamiltonians.len()),
                    ));
                };
                ProblemSpec::scalar(h.clone(), self.diffusion.clone(), 1.0)
            }
            Some(rows) => {
                let c = CouplingMatrix::new(rows.clone()).map_err(|e| CliError::invalid("problem.coupling", e))?;
                ProblemSpec::system(self.hamiltonians.clone(), self.diffusion.clone(), c, 1.0)
            }
        };
        Ok(spec.with_gradient_bound(self.gradient_bound))
    }

    pub fn components(&self) -> usize {
        self.hamiltonians.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Plot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
    /// Record wall times in the sweep tables. Off by default so reruns are
    /// byte-identical; the manifest always records them.
    #[serde(default)]
    pub timings: bool,
}

fn default_directory() -> PathBuf {
    PathBuf::from("out")
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json, Format::Plot]
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { directory: default_directory(), formats: default_formats(), timings: false }
    }
}

impl OutputConfig {
    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    /// Hypothesis checks on the catalog entries.
    Validate,
    /// Cell problems per `ε` with `η = ε⁴`.
    ErgodicSweep,
    /// Forward and adjoint solves: mass, positivity, energy, representation.
    AdjointAudit,
    /// Full pipeline per `ε` with the key, general and coupling estimates.
    Estimates,
    /// `ε‖w_t(·, T)‖∞` per `ε` with an envelope fit.
    Rate,
    /// Distance between the `η = 0` and `η = ε⁴` solutions per `ε`.
    Closeness,
    /// Unrescaled run to integer times against an ergodic reference.
    Longtime,
}

impl StageKind {
    fn label(self) -> &'static str {
        match self {
            StageKind::Validate => "validate",
            StageKind::ErgodicSweep => "ergodic-sweep",
            StageKind::AdjointAudit => "adjoint-audit",
            StageKind::Estimates => "estimates",
            StageKind::Rate => "rate",
            StageKind::Closeness => "closeness",
            StageKind::Longtime => "longtime",
        }
    }
}

/// Initial data of forward solves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    /// One profile per equation.
    Profiles { profiles: Vec<Profile> },
    /// The corrector of the same `ε` from an ergodic-sweep dependency.
    Corrector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub kind: StageKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub depends_on: Vec<String>,
    /// Strictly decreasing.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epsilons: Vec<f64>,
    /// Rescaled final time of forward solves.
    #[serde(default = "one")]
    pub horizon: f64,
    /// Explicit time step; otherwise `cfl_fraction` times the monotonicity
    /// limit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default = "one")]
    pub cfl_fraction: f64,
    /// Extra audit runs, each with half the previous time step.
    #[serde(default)]
    pub dt_refinements: usize,
    #[serde(default = "default_solver_tolerance")]
    pub solver_tolerance: f64,
    #[serde(default = "default_ergodic_tolerance")]
    pub ergodic_tolerance: f64,
    #[serde(default = "default_ergodic_max_time")]
    pub ergodic_max_time: f64,
    /// Margin of the per-node gradient boxes in a second cell-problem pass.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_box: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialConfig>,
    /// Adjoint source node; defaults to the node of largest `|ε w_t|`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<usize>,
    /// Equation carrying the adjoint source (0-based).
    #[serde(default)]
    pub component: usize,
    /// Envelope exponent of the rate stage; 1/4 for one equation and 1/2
    /// for systems by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponent: Option<f64>,
    /// Reference constant for the ergodic-sweep slope; defaults to the
    /// Richardson extrapolation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_constant: Option<f64>,
    #[serde(default = "default_t_final")]
    pub t_final: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn one() -> f64 {
    1.0
}

fn default_solver_tolerance() -> f64 {
    hjlab::forward::DEFAULT_SOLVER_TOLERANCE
}

fn default_ergodic_tolerance() -> f64 {
    hjlab::ErgodicOptions::default().tolerance
}

fn default_ergodic_max_time() -> f64 {
    hjlab::ErgodicOptions::default().max_time
}

fn default_t_final() -> usize {
    100
}

fn default_samples() -> usize {
    10_000
}

impl StageConfig {
    /// A stage of `kind` with every parameter at its default.
    pub fn new(name: &str, kind: StageKind) -> Self {
        Self {
            name: name.into(),
            kind,
            depends_on: Vec::new(),
            epsilons: Vec::new(),
            horizon: 1.0,
            dt: None,
            cfl_fraction: 1.0,
            dt_refinements: 0,
            solver_tolerance: default_solver_tolerance(),
            ergodic_tolerance: default_ergodic_tolerance(),
            ergodic_max_time: default_ergodic_max_time(),
            local_box: None,
            initial: None,
            source: None,
            component: 0,
            exponent: None,
            reference_constant: None,
            t_final: default_t_final(),
            samples: default_samples(),
        }
    }

    pub fn after(mut self, dependency: &str) -> Self {
        self.depends_on.push(dependency.into());
        self
    }

    pub fn with_epsilons(mut self, eps: &[f64]) -> Self {
        self.epsilons = eps.to_vec();
        self
    }

    pub fn with_initial(mut self, initial: InitialConfig) -> Self {
        self.initial = Some(initial);
        self
    }

    fn field(&self, index: usize, name: &str) -> String {
        format!("stage[{index}].{name}")
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::Schema(e.to_string()))?;
        let config: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::Schema(format!("at `{}`: {}", e.path(), e.inner())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration types serialize to TOML")
    }

    pub fn grid(&self) -> Result<PeriodicGrid, CliError> {
        PeriodicGrid::new(self.grid.dim, self.grid.n).map_err(|e| CliError::invalid("grid", e))
    }

    pub fn stage(&self, name: &str) -> Option<&StageConfig> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Schema and cross-field checks; runs no solver.
    pub fn validate(&self) -> Result<(), CliError> {
        let grid = self.grid()?;
        let family = self.problem.family()?;
        family.validate(grid.dim()).map_err(|e| CliError::invalid("problem", e))?;
        if self.output.formats.is_empty() {
            return Err(CliError::invalid("output.formats", "at least one format is required"));
        }
        if self.stages.is_empty() {
            return Err(CliError::invalid("stage", "at least one stage is required"));
        }
        let m = self.problem.components();
        let mut seen: HashSet<&str> = HashSet::new();
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.name.is_empty() || !stage.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(CliError::invalid(stage.field(i, "name"), "use letters, digits, '-' and '_'"));
            }
            for dep in &stage.depends_on {
                if !seen.contains(dep.as_str()) {
                    return Err(CliError::invalid(
                        stage.field(i, "depends_on"),
                        format!("'{dep}' is not an earlier stage"),
                    ));
                }
            }
            if !seen.insert(&stage.name) {
                return Err(CliError::invalid(stage.field(i, "name"), format!("duplicate stage '{}'", stage.name)));
            }
            self.validate_stage(i, stage, m, grid)?;
        }
        Ok(())
    }

    fn validate_stage(&self, i: usize, s: &StageConfig, m: usize, grid: PeriodicGrid) -> Result<(), CliError> {
        let eps = &s.epsilons;
        if eps.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(CliError::invalid(s.field(i, "epsilons"), "values must be positive"));
        }
        if eps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(CliError::invalid(s.field(i, "epsilons"), "values must be strictly decreasing"));
        }
        let needs_eps = !matches!(s.kind, StageKind::Validate);
        if needs_eps && eps.is_empty() {
            return Err(CliError::invalid(s.field(i, "epsilons"), format!("{} needs an epsilon list", s.kind.label())));
        }
        if s.kind == StageKind::Rate && eps.len() < 3 {
            return Err(CliError::invalid(s.field(i, "epsilons"), "a rate fit needs at least 3 values"));
        }
        if s.kind == StageKind::Longtime && eps.len() != 1 {
            return Err(CliError::invalid(s.field(i, "epsilons"), "longtime takes exactly one epsilon"));
        }
        for (name, value) in [
            ("horizon", s.horizon),
            ("cfl_fraction", s.cfl_fraction),
            ("solver_tolerance", s.solver_tolerance),
            ("ergodic_tolerance", s.ergodic_tolerance),
            ("ergodic_max_time", s.ergodic_max_time),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(CliError::invalid(s.field(i, name), "must be positive"));
            }
        }
        if s.cfl_fraction > 1.0 {
            return Err(CliError::invalid(s.field(i, "cfl_fraction"), "must not exceed 1"));
        }
        if s.dt.is_some_and(|dt| !(dt > 0.0 && dt.is_finite())) {
            return Err(CliError::invalid(s.field(i, "dt"), "must be positive"));
        }
        if s.local_box.is_some_and(|b| !(b >= 1.0 && b.is_finite())) {
            return Err(CliError::invalid(s.field(i, "local_box"), "margin must be at least 1"));
        }
        if s.source.is_some_and(|x| x >= grid.len()) {
            return Err(CliError::invalid(s.field(i, "source"), format!("node out of range 0..{}", grid.len())));
        }
        if s.component >= m {
            return Err(CliError::invalid(s.field(i, "component"), format!("only {m} equations")));
        }
        if s.samples == 0 {
            return Err(CliError::invalid(s.field(i, "samples"), "must be positive"));
        }
        if s.t_final == 0 {
            return Err(CliError::invalid(s.field(i, "t_final"), "must be positive"));
        }
        let forward = matches!(
            s.kind,
            StageKind::AdjointAudit
                | StageKind::Estimates
                | StageKind::Rate
                | StageKind::Closeness
                | StageKind::Longtime
        );
        match &s.initial {
            Some(InitialConfig::Profiles { profiles }) => {
                if profiles.len() != m {
                    return Err(CliError::invalid(
                        s.field(i, "initial.profiles"),
                        format!("{} profiles for {m} equations", profiles.len()),
                    ));
                }
                for p in profiles {
                    p.validate().map_err(|e| CliError::invalid(s.field(i, "initial.profiles"), e))?;
                }
            }
            Some(InitialConfig::Corrector) => {
                if matches!(s.kind, StageKind::Closeness | StageKind::AdjointAudit | StageKind::Longtime) {
                    return Err(CliError::invalid(
                        s.field(i, "initial"),
                        format!("{} does not accept corrector initial data", s.kind.label()),
                    ));
                }
            }
            None if forward => {
                return Err(CliError::invalid(s.field(i, "initial"), format!("{} needs initial data", s.kind.label())))
            }
            None => {}
        }
        let needs_cell = match s.kind {
            StageKind::Estimates | StageKind::Longtime => true,
            StageKind::Rate => s.initial == Some(InitialConfig::Corrector),
            _ => false,
        };
        if needs_cell {
            let covered = s.depends_on.iter().filter_map(|d| self.stage(d)).any(|d| {
                d.kind == StageKind::ErgodicSweep && eps.iter().all(|e| d.epsilons.contains(e)) && d.local_box.is_none()
            });
            if !covered {
                return Err(CliError::invalid(
                    s.field(i, "depends_on"),
                    "needs an ergodic-sweep dependency (without local_box) covering every epsilon",
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "minimal"

[grid]
dim = 1
n = 64

[problem]
gradient_bound = 2.0
diffusion = { family = "sin_squared", amplitude = 1.0 }

[[problem.hamiltonians]]
family = "quadratic"
potential = [{ amplitude = 0.3, k = [1, 0], wave = "cos" }]

[[stage]]
name = "cell"
kind = "ergodic-sweep"
epsilons = [0.5]
"#;

    #[test]
    fn minimal_config_parses_and_round_trips() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.stages[0].kind, StageKind::ErgodicSweep);
        assert_eq!(c.output, OutputConfig::default());
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_family_names_the_field() {
        let bad = MINIMAL.replace("family = \"quadratic\"", "family = \"cubic\"");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, CliError::Schema(_)));
        assert!(msg.contains("cubic") && msg.contains("hamiltonians"), "{msg}");
    }

    #[test]
    fn unknown_stage_field_is_rejected() {
        let bad = MINIMAL.replace("epsilons = [0.5]", "epsilons = [0.5]\ntolerence = 1e-9");
        let msg = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(msg.contains("tolerence"), "{msg}");
    }

    #[test]
    fn epsilon_lists_must_decrease() {
        let bad = MINIMAL.replace("epsilons = [0.5]", "epsilons = [0.25, 0.5]");
        let msg = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(msg.contains("stage[0].epsilons"), "{msg}");
    }

    #[test]
    fn dependencies_must_precede_and_produce() {
        let extra = r#"
[[stage]]
name = "est"
kind = "estimates"
epsilons = [0.25]
depends_on = ["cell"]
initial = { source = "corrector" }
"#;
        let msg = ExperimentConfig::from_toml(&format!("{MINIMAL}{extra}")).unwrap_err().to_string();
        assert!(msg.contains("stage[1].depends_on"), "{msg}");
        let ok = format!("{MINIMAL}{extra}").replace("epsilons = [0.5]", "epsilons = [0.5, 0.25]");
        ExperimentConfig::from_toml(&ok).unwrap();
        let forward = format!("{MINIMAL}{extra}").replace("depends_on = [\"cell\"]", "depends_on = [\"later\"]");
        assert!(ExperimentConfig::from_toml(&forward).unwrap_err().to_string().contains("not an earlier stage"));
    }

    #[test]
    fn system_without_coupling_is_rejected() {
        let two = MINIMAL.replace("[[stage]]", "[[problem.hamiltonians]]\nfamily = \"quadratic\"\n\n[[stage]]");
        let msg = ExperimentConfig::from_toml(&two).unwrap_err().to_string();
        assert!(msg.contains("problem.coupling"), "{msg}");
    }
}
