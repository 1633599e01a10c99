//! Sequential stage execution.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::time::Instant;

use hjlab::analysis::{
    closeness_check, envelope_constant, estimates_to_csv, fit_loglog, fmt_num, large_time_convergence, no_doubling,
    pipeline_row_with, rate_value, InitialData, PipelineOptions, PipelineRow, SummaryEntry, COUPLING_CHAIN,
    COUPLING_PAIR, II,
};
use hjlab::ergodic::{normalize_constant, viscosity_sweep};
use hjlab::forward::SpatialOperator;
use hjlab::problem::{validate_coupling, validate_pair};
use hjlab::{
    ErgodicOptions, ErgodicSolution, PeriodicGrid, ProblemSpec, RateFit, ScalarField, SolveOptions, SweepTable,
};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Format, InitialConfig, StageConfig, StageKind};
use crate::output::{csv, RunManifest, Sink, StageRecord, StageStatus, StageSummary, Summary};
use crate::CliError;

pub const CATALOG: &str = concat!("hjlab ", env!("CARGO_PKG_VERSION"));

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub summary: Summary,
    pub directory: PathBuf,
}

/// Validates `config`, runs its stages in order and writes the outputs.
///
/// Stage failures are recorded in the manifest and do not abort the run;
/// stages depending on a stage that did not pass are skipped.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    config.validate()?;
    let grid = config.grid()?;
    let mut family = config.problem.family()?;
    let mut normalization_constant = None;
    if config.problem.normalize {
        let (shifted, c) = normalize_constant(&family, grid, ErgodicOptions::default())?;
        family = shifted;
        normalization_constant = Some(c);
    }
    let directory = config.output.directory.clone();
    let mut runner = Runner { config, grid, family, sweeps: HashMap::new(), sink: Sink::new(&directory)? };
    let mut manifest = RunManifest {
        experiment: config.name.clone(),
        config_hash: hex::encode(Sha256::digest(config.to_toml().as_bytes())),
        catalog: CATALOG.into(),
        stages: Vec::new(),
    };
    let mut summary = Summary { experiment: config.name.clone(), normalization_constant, stages: Vec::new() };

    for stage in &config.stages {
        let blocked =
            stage.depends_on.iter().find(|d| manifest.record(d).is_none_or(|r| r.status != StageStatus::Passed));
        let mut record = StageRecord {
            name: stage.name.clone(),
            kind: stage.kind,
            status: StageStatus::Skipped,
            wall_time: 0.0,
            outputs: Vec::new(),
            error: None,
            skipped_because: blocked.cloned(),
        };
        let mut stage_summary = StageSummary::new(&stage.name, StageStatus::Skipped);
        if blocked.is_none() {
            let start = Instant::now();
            let (status, out) = match runner.run_stage(stage) {
                Ok(out) if out.failure.is_none() => (StageStatus::Passed, out),
                Ok(out) => (StageStatus::Failed, out),
                Err(e) => (StageStatus::Failed, StageOutput { failure: Some(e.to_string()), ..Default::default() }),
            };
            record.wall_time = start.elapsed().as_secs_f64();
            record.status = status;
            record.outputs = out.outputs;
            record.error = out.failure;
            stage_summary.status = status;
            stage_summary.metrics = out.metrics;
            stage_summary.entries = out.entries;
        }
        manifest.stages.push(record);
        summary.stages.push(stage_summary);
    }

    if config.output.wants(Format::Plot) {
        runner.sink.write_plot_script()?;
    }
    if config.output.wants(Format::Json) {
        runner.sink.write("summary.json", &to_json(&summary))?;
    }
    runner.sink.write("manifest.json", &to_json(&manifest))?;
    Ok(RunOutcome { manifest, summary, directory })
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("run records serialize to JSON");
    text.push('\n');
    text
}

#[derive(Debug, Default)]
struct StageOutput {
    metrics: BTreeMap<String, f64>,
    entries: Vec<SummaryEntry>,
    outputs: Vec<String>,
    /// Set when the stage ran but did not meet its own pass condition.
    failure: Option<String>,
}

impl StageOutput {
    fn metric(&mut self, key: impl Into<String>, value: f64) {
        self.metrics.insert(key.into(), value);
    }

    fn flag(&mut self, key: impl Into<String>, value: bool) {
        self.metric(key, if value { 1.0 } else { 0.0 });
    }

    fn series(&mut self, quantity: &str, epsilons: &[f64], values: &[f64]) {
        for (e, v) in epsilons.iter().zip(values) {
            self.entries.push(SummaryEntry::new(quantity, Some(*e), *v));
        }
    }
}

struct Runner<'a> {
    config: &'a ExperimentConfig,
    grid: PeriodicGrid,
    /// The problem family at `ε = 1`, normalized when requested.
    family: ProblemSpec,
    sweeps: HashMap<String, SweepTable>,
    sink: Sink,
}

fn line(cells: &[String]) -> String {
    let mut s = cells.join(",");
    s.push('\n');
    s
}

fn max_of(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, f64::max)
}

fn min_of(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(f64::INFINITY, f64::min)
}

/// `ε`-power by which a per-`ε` estimate is divided before the boundedness
/// check: `II ≤ C√ε` and the pairwise coupling term `≤ Cε`.
fn scaling_exponent(quantity: &str) -> f64 {
    match quantity {
        II => 0.5,
        COUPLING_PAIR => 1.0,
        _ => 0.0,
    }
}

impl Runner<'_> {
    fn run_stage(&mut self, stage: &StageConfig) -> Result<StageOutput, CliError> {
        match stage.kind {
            StageKind::Validate => self.validate(stage),
            StageKind::ErgodicSweep => self.ergodic_sweep(stage),
            StageKind::AdjointAudit => self.adjoint_audit(stage),
            StageKind::Estimates => self.estimates(stage),
            StageKind::Rate => self.rate(stage),
            StageKind::Closeness => self.closeness(stage),
            StageKind::Longtime => self.longtime(stage),
        }
    }

    fn table(&self, out: &mut StageOutput, name: &str, contents: &str) -> Result<(), CliError> {
        if self.config.output.wants(Format::Csv) {
            out.outputs.push(self.sink.write(name, contents)?);
        }
        Ok(())
    }

    fn plot(
        &mut self,
        out: &mut StageOutput,
        name: &str,
        title: &str,
        points: &[(f64, f64)],
        loglog: bool,
    ) -> Result<(), CliError> {
        if self.config.output.wants(Format::Plot) {
            out.outputs.push(self.sink.write_xy(name, title, points, loglog)?);
        }
        Ok(())
    }

    fn problem_at(&self, epsilon: f64) -> ProblemSpec {
        self.family.clone().at_epsilon(epsilon)
    }

    fn ergodic_options(stage: &StageConfig) -> ErgodicOptions {
        ErgodicOptions {
            tolerance: stage.ergodic_tolerance,
            max_time: stage.ergodic_max_time,
            dt: stage.dt,
            solver_tolerance: stage.solver_tolerance,
            local_box: stage.local_box,
            ..ErgodicOptions::default()
        }
    }

    /// Explicit step, or `cfl_fraction` of the monotonicity limit of
    /// `problem`; `None` leaves the limit to the solver.
    fn time_step(&self, stage: &StageConfig, problem: &ProblemSpec) -> Result<Option<f64>, CliError> {
        if stage.dt.is_some() || stage.cfl_fraction == 1.0 {
            return Ok(stage.dt);
        }
        let op = SpatialOperator::new(problem, self.grid)?;
        Ok(Some(stage.cfl_fraction * op.cfl_time_step()))
    }

    fn pipeline_options(&self, stage: &StageConfig, dt: Option<f64>) -> PipelineOptions {
        PipelineOptions {
            solve: SolveOptions { dt, stored_every: 1, solver_tolerance: stage.solver_tolerance },
            ergodic: Self::ergodic_options(stage),
            horizon: stage.horizon,
            source: stage.source,
            component: stage.component,
        }
    }

    fn initial_data(stage: &StageConfig) -> InitialData {
        match &stage.initial {
            Some(InitialConfig::Profiles { profiles }) => InitialData::Profiles(profiles.clone()),
            Some(InitialConfig::Corrector) | None => InitialData::Corrector,
        }
    }

    fn initial_fields(&self, stage: &StageConfig) -> Result<Vec<ScalarField>, CliError> {
        match &stage.initial {
            Some(InitialConfig::Profiles { profiles }) => Ok(profiles.iter().map(|p| p.sample(self.grid)).collect()),
            _ => Err(CliError::invalid(format!("{}.initial", stage.name), "profiles are required")),
        }
    }

    /// Corrector at `epsilon` from an ergodic-sweep dependency.
    fn cell(&self, stage: &StageConfig, epsilon: f64) -> Result<&ErgodicSolution, CliError> {
        stage
            .depends_on
            .iter()
            .filter(|d| self.config.stage(d).is_some_and(|s| s.local_box.is_none()))
            .filter_map(|d| self.sweeps.get(d))
            .find_map(|t| t.rows.iter().position(|r| r.epsilon == epsilon).map(|i| &t.solutions[i]))
            .ok_or_else(|| {
                CliError::invalid(format!("{}.depends_on", stage.name), format!("no corrector for epsilon {epsilon}"))
            })
    }

    fn validate(&mut self, stage: &StageConfig) -> Result<StageOutput, CliError> {
        let mut out = StageOutput::default();
        let dim = self.grid.dim();
        let mut reports = Vec::new();
        for (k, h) in self.family.hamiltonians.iter().enumerate() {
            reports.push((format!("H{}", k + 1), validate_pair(h, &self.family.diffusion, dim, stage.samples)?));
        }
        if let Some(c) = &self.family.coupling {
            reports.push(("coupling".to_string(), validate_coupling(c)));
        }
        let mut text = String::from("target,check,passed,empirical,bound\n");
        let mut failed = 0usize;
        for (target, report) in &reports {
            for c in &report.checks {
                text.push_str(&line(&[
                    target.clone(),
                    c.name.clone(),
                    c.passed.to_string(),
                    fmt_num(c.empirical),
                    fmt_num(c.bound),
                ]));
                out.metric(format!("{target}/{}", c.name), c.empirical);
                failed += usize::from(!c.passed);
            }
        }
        out.metric("checks", reports.iter().map(|(_, r)| r.checks.len()).sum::<usize>() as f64);
        out.metric("failed_checks", failed as f64);
        self.table(&mut out, &format!("{}.csv", stage.name), &text)?;
        for (target, report) in reports {
            if let Err(e) = report.ensure() {
                out.failure = Some(format!("{target}: {e}"));
                break;
            }
        }
        Ok(out)
    }

    fn ergodic_sweep(&mut self, stage: &StageConfig) -> Result<StageOutput, CliError> {
        let mut out = StageOutput::default();
        let table = viscosity_sweep(&self.family, self.grid, &stage.epsilons, Self::ergodic_options(stage))?;
        self.table(&mut out, &format!("{}.csv", stage.name), &table.to_csv_with(self.config.output.timings))?;
        let eps: Vec<f64> = table.rows.iter().map(|r| r.epsilon).collect();
        let hbar: Vec<f64> = table.rows.iter().map(|r| r.hbar).collect();
        out.series("Hbar", &eps, &hbar);
        out.series("grad_norm", &eps, &table.rows.iter().map(|r| r.grad_norm).collect::<Vec<_>>());
        out.series("residual", &eps, &table.rows.iter().map(|r| r.residual).collect::<Vec<_>>());
        if let Some(last) = table.rows.last() {
            out.metric("hbar", last.hbar);
            out.metric("max_residual", max_of(table.rows.iter().map(|r| r.residual)));
            out.metric("gradient_variation", table.gradient_variation());
        }
        let extrapolated = table.extrapolated_constant();
        if let Some(c) = extrapolated {
            out.metric("extrapolated_constant", c);
        }
        if let Some(c) = stage.reference_constant.or(extrapolated) {
            out.metric("reference_constant", c);
            let errors: Vec<(f64, f64)> = eps.iter().zip(&hbar).map(|(e, h)| (*e, (h - c).abs())).collect();
            if let Ok(slope) = table.slope(c) {
                out.metric("slope", slope);
                let bound = envelope_constant(&eps, &errors.iter().map(|p| p.1).collect::<Vec<_>>(), 2.0);
                out.entries.push(SummaryEntry {
                    bound_constant: Some(bound),
                    slope: Some(slope),
                    ..SummaryEntry::new("Hbar_error", None, max_of(errors.iter().map(|p| p.1)))
                });
            }
            self.plot(&mut out, &format!("{}_hbar_error.dat", stage.name), "|Hbar - c| vs epsilon", &errors, true)?;
        }
        if !table.failures.is_empty() {
            let list: Vec<String> =
                table.failures.iter().map(|f| format!("epsilon {}: {}", f.epsilon, f.error)).collect();
            out.failure = Some(list.join("; "));
        }
        self.sweeps.insert(stage.name.clone(), table);
        Ok(out)
    }

    fn adjoint_audit(&mut self, stage: &StageConfig) -> Result<StageOutput, CliError> {
        let mut out = StageOutput::default();
        let initial = Self::initial_data(stage);
        let mut jobs = Vec::new();
        for (i, &eps) in stage.epsilons.iter().enumerate() {
            let problem = self.problem_at(eps);
            let base = match stage.dt {
                Some(dt) => dt,
                None => stage.cfl_fraction * SpatialOperator::new(&problem, self.grid)?.cfl_time_step(),
            };
            jobs.push((i, problem, base));
        }
        let audit = |i: usize, r: usize, problem: &ProblemSpec, dt: f64, source: Option<usize>| {
            let opts = PipelineOptions { source, ..self.pipeline_options(stage, Some(dt)) };
            pipeline_row_with(problem, self.grid, None, &initial, opts).map(|row| (i, r, row))
        };
        let mut rows: Vec<(usize, usize, PipelineRow)> = jobs
            .par_iter()
            .map(|(i, problem, dt)| audit(*i, 0, problem, *dt, stage.source))
            .collect::<Result<_, _>>()?;
        // Refinements keep the source node of the base run so the gaps compare
        // the same quantity.
        let refined: Vec<(usize, usize, PipelineRow)> = jobs
            .par_iter()
            .flat_map(|(i, problem, dt)| {
                let source = rows[*i].2.source;
                (1..=stage.dt_refinements)
                    .into_par_iter()
                    .map(move |r| audit(*i, r, problem, dt / f64::from(1u32 << r), Some(source)))
            })
            .collect::<Result<_, _>>()?;
        rows.extend(refined);
        rows.sort_by_key(|(i, r, _)| (*i, *r));

        let mut text = String::from(
            "epsilon,eta,dt,steps,source,rate_value,energy_drift,representation_lhs,representation_rhs,representation_gap,max_mass_error,min_density\n",
        );
        for (i, r, row) in &rows {
            text.push_str(&line(&[
                fmt_num(row.epsilon),
                fmt_num(row.eta),
                fmt_num(row.dt),
                row.steps.to_string(),
                row.source.to_string(),
                fmt_num(row.rate_value),
                fmt_num(row.energy_drift),
                fmt_num(row.representation.lhs),
                fmt_num(row.representation.rhs),
                fmt_num(row.representation.gap),
                fmt_num(row.max_mass_error),
                fmt_num(row.min_density),
            ]));
            self.table(&mut out, &format!("{}_energy_e{i}_r{r}.csv", stage.name), &row.energy.to_csv())?;
            if *r == 0 {
                let e0 = row.energy.energy.first().copied().unwrap_or(0.0);
                let points: Vec<(f64, f64)> =
                    row.energy.times.iter().zip(&row.energy.energy).map(|(t, e)| (*t, e - e0)).collect();
                self.plot(&mut out, &format!("{}_energy_e{i}.dat", stage.name), "E(t) - E(0)", &points, false)?;
            }
        }
        self.table(&mut out, &format!("{}.csv", stage.name), &text)?;

        let base_rows: Vec<&PipelineRow> = rows.iter().filter(|(_, r, _)| *r == 0).map(|(_, _, row)| row).collect();
        let eps: Vec<f64> = base_rows.iter().map(|r| r.epsilon).collect();
        out.series("energy_drift", &eps, &base_rows.iter().map(|r| r.energy_drift).collect::<Vec<_>>());
        out.series("representation_gap", &eps, &base_rows.iter().map(|r| r.representation.gap).collect::<Vec<_>>());
        out.series("mass_error", &eps, &base_rows.iter().map(|r| r.max_mass_error).collect::<Vec<_>>());
        out.series("min_density", &eps, &base_rows.iter().map(|r| r.min_density).collect::<Vec<_>>());

        let all = || rows.iter().map(|(_, _, row)| row);
        out.metric("max_energy_drift", max_of(all().map(|r| r.energy_drift)));
        out.metric("max_representation_gap", max_of(all().map(|r| r.representation.gap)));
        out.metric(
            "max_relative_representation_gap",
            max_of(all().map(|r| r.representation.gap / r.representation.lhs.abs().max(1.0))),
        );
        // Gap over the allowance max(1e-6, 5 dt²)·max(1, |lhs|); at most 1 passes.
        out.metric(
            "representation_allowance_ratio",
            max_of(
                all().map(|r| {
                    r.representation.gap / ((5.0 * r.dt * r.dt).max(1e-6) * r.representation.lhs.abs().max(1.0))
                }),
            ),
        );
        out.metric("max_mass_error", max_of(all().map(|r| r.max_mass_error)));
        out.metric("min_density", min_of(all().map(|r| r.min_density)));
        if stage.dt_refinements > 0 {
            let mut ratios = Vec::new();
            for i in 0..stage.epsilons.len() {
                let gaps: Vec<f64> =
                    rows.iter().filter(|(j, _, _)| *j == i).map(|(_, _, row)| row.representation.gap).collect();
                ratios.extend(gaps.windows(2).map(|w| w[0] / w[1]));
            }
            out.metric("min_gap_ratio", min_of(ratios));
        }
        Ok(out)
    }

    fn estimates(&mut self, stage: &StageConfig) -> Result<StageOutput, CliError> {
        let mut out = StageOutput::default();
        let initial = Self::initial_data(stage);
        let jobs = stage
            .epsilons
            .iter()
            .map(|&eps| {
                let problem = self.problem_at(eps);
                let dt = self.time_step(stage, &problem)?;
                Ok((problem, self.cell(stage, eps)?, dt))
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let rows: Vec<PipelineRow> = jobs
            .into_par_iter()
            .map(|(problem, cell, dt)| {
                pipeline_row_with(&problem, self.grid, Some(cell), &initial, self.pipeline_options(stage, dt))
            })
            .collect::<Result<_, _>>()?;

        let reports: Vec<_> = rows.iter().map(|r| r.estimates.clone()).collect();
        self.table(&mut out, &format!("{}.csv", stage.name), &estimates_to_csv(&reports))?;
        let eps: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
        let audit: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                vec![r.epsilon, r.rate_value, r.energy_drift, r.representation.gap, r.max_mass_error, r.min_density]
            })
            .collect();
        self.table(
            &mut out,
            &format!("{}_audit.csv", stage.name),
            &csv(
                &["epsilon", "rate_value", "energy_drift", "representation_gap", "max_mass_error", "min_density"],
                &audit,
            ),
        )?;
        out.series("rate_value", &eps, &rows.iter().map(|r| r.rate_value).collect::<Vec<_>>());
        out.metric("max_energy_drift", max_of(rows.iter().map(|r| r.energy_drift)));
        out.metric("max_representation_gap", max_of(rows.iter().map(|r| r.representation.gap)));
        out.metric("max_mass_error", max_of(rows.iter().map(|r| r.max_mass_error)));
        out.metric("min_density", min_of(rows.iter().map(|r| r.min_density)));

        let names: Vec<String> =
            reports.first().map(|r| r.entries.iter().map(|e| e.name.clone()).collect()).unwrap_or_default();
        for name in names {
            let values: Vec<f64> = reports.iter().map(|r| r.get(&name).unwrap_or(f64::NAN)).collect();
            let p = scaling_exponent(&name);
            let scaled: Vec<f64> = eps.iter().zip(&values).map(|(e, v)| v / e.powf(p)).collect();
            out.series(&name, &eps, &values);
            out.metric(format!("{name}_max"), max_of(values.iter().copied()));
            out.metric(format!("{name}_bound"), envelope_constant(&eps, &values, p));
            out.flag(format!("{name}_no_doubling"), no_doubling(&scaled));
            let slope = fit_loglog(&eps, &values).ok().map(|f| f.slope);
            if let Some(s) = slope {
                out.metric(format!("{name}_slope"), s);
            }
            if name == COUPLING_CHAIN {
                out.flag(format!("{name}_decreasing"), values.windows(2).all(|w| w[1] < w[0]));
            }
            out.entries.push(SummaryEntry {
                bound_constant: Some(envelope_constant(&eps, &values, p)),
                slope,
                ..SummaryEntry::new(&name, None, max_of(scaled.iter().copied()))
            });
            let points: Vec<(f64, f64)> = eps.iter().copied().zip(values).collect();
            self.plot(&mut out, &format!("{}_{name}.dat", stage.name), &format!("{name} vs epsilon"), &points, true)?;
        }
        Ok(out)
    }

    fn rate(&mut self, stage: &StageConfig) -> Result<StageOutput, CliError> {
        let mut out = StageOutput::default();
        let initial = Self::initial_data(stage);
        let corrector = matches!(initial, InitialData::Corrector);
        let jobs = stage
            .epsilons
            .iter()
            .map(|&eps| {
                let problem = self.problem_at(eps);
                let dt = self.time_step(stage, &problem)?;
                let cell = if corrector { Some(self.cell(stage, eps)?) } else { None };
                Ok((problem, cell, dt))
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let values: Vec<f64> = jobs
            .into_par_iter()
            .map(|(problem, cell, dt)| {
                rate_value(&problem, self.grid, &initial, cell, self.pipeline_options(stage, dt))
            })
            .collect::<Result<_, _>>()?;

        let eps = stage.epsilons.clone();
        let exponent = stage.exponent.unwrap_or(if self.family.components() == 1 { 0.25 } else { 0.5 });
        let envelope = envelope_constant(&eps, &values, exponent);
        let mut text = String::from("epsilon,value\n");
        for (e, v) in eps.iter().zip(&values) {
            text.push_str(&line(&[fmt_num(*e), fmt_num(*v)]));
        }
        let slope = match RateFit::new(eps.clone(), values.clone(), exponent) {
            Ok(fit) => {
                out.metric("fit_residual", fit.fit_residual);
                Some(fit.slope)
            }
            Err(_) => None,
        };
        self.table(&mut out, &format!("{}.csv", stage.name), &text)?;
        out.series("rate", &eps, &values);
        out.metric("exponent", exponent);
        out.metric("envelope_constant", envelope);
        out.metric("max_value", max_of(values.iter().copied()));
        if let Some(s) = slope {
            out.metric("slope", s);
        }
        out.entries.push(SummaryEntry {
            bound_constant: Some(envelope),
            slope,
            ..SummaryEntry::new("rate", None, max_of(values.iter().copied()))
        });
        let points: Vec<(f64, f64)> = eps.iter().copied().zip(values).collect();
        self.plot(&mut out, &format!("{}.dat", stage.name), "epsilon |w_t(., T)| vs epsilon", &points, true)?;
        Ok(out)
    }

    fn closeness(&mut self, stage: &StageConfig) -> Result<StageOutput, CliError> {
        let mut out = StageOutput::default();
        let u0 = self.initial_fields(stage)?;
        let jobs = stage
            .epsilons
            .iter()
            .map(|&eps| Ok((eps, self.time_step(stage, &self.problem_at(eps))?)))
            .collect::<Result<Vec<_>, CliError>>()?;
        let distances: Vec<f64> = jobs
            .into_par_iter()
            .map(|(eps, dt)| closeness_check(&self.family, eps, &u0, self.pipeline_options(stage, dt)))
            .collect::<Result<_, _>>()?;

        let eps = stage.epsilons.clone();
        let scaled: Vec<f64> = eps.iter().zip(&distances).map(|(e, d)| d / e).collect();
        let rows: Vec<Vec<f64>> = (0..eps.len()).map(|i| vec![eps[i], distances[i], scaled[i]]).collect();
        self.table(&mut out, &format!("{}.csv", stage.name), &csv(&["epsilon", "distance", "scaled_distance"], &rows))?;
        out.series("closeness", &eps, &distances);
        let bound = envelope_constant(&eps, &distances, 1.0);
        out.metric("bound_constant", bound);
        out.metric("max_distance", max_of(distances.iter().copied()));
        out.flag("no_doubling", no_doubling(&scaled));
        let slope = fit_loglog(&eps, &distances).ok().map(|f| f.slope);
        if let Some(s) = slope {
            out.metric("slope", s);
        }
        out.entries.push(SummaryEntry {
            bound_constant: Some(bound),
            slope,
            ..SummaryEntry::new("closeness", None, max_of(scaled.iter().copied()))
        });
        let points: Vec<(f64, f64)> = eps.iter().copied().zip(distances).collect();
        self.plot(&mut out, &format!("{}.dat", stage.name), "|u - w|(., T) vs epsilon", &points, true)?;
        Ok(out)
    }

    fn longtime(&mut self, stage: &StageConfig) -> Result<StageOutput, CliError> {
        let mut out = StageOutput::default();
        let eps = stage.epsilons[0];
        let problem = self.problem_at(eps);
        let reference = self.cell(stage, eps)?;
        let u0 = self.initial_fields(stage)?;
        let solve = SolveOptions { dt: stage.dt, stored_every: 1, solver_tolerance: stage.solver_tolerance };
        let series = large_time_convergence(&problem, &u0, stage.t_final, reference, solve)?;
        self.table(&mut out, &format!("{}.csv", stage.name), &series.to_csv())?;
        out.metric("hbar", reference.ergodic_constant);
        out.metric("final_adjusted_distance", series.adjusted_distance.last().copied().unwrap_or(f64::NAN));
        out.metric("final_distance", series.distance.last().copied().unwrap_or(f64::NAN));
        out.flag("non_increasing", series.non_increasing.iter().all(|b| *b));
        let points: Vec<(f64, f64)> =
            series.times.iter().copied().zip(series.adjusted_distance.iter().copied()).collect();
        self.plot(&mut out, &format!("{}.dat", stage.name), "adjusted distance vs time", &points, false)?;
        Ok(out)
    }
}
