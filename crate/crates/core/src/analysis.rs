//! Integral identities and estimates evaluated on solver output, rate fits,
//! and their serialization.

use serde::Serialize;

use crate::adjoint::{argmax_abs, linearize, solve_adjoint, solve_system_adjoint, AdjointDensity, Linearization};
use crate::ergodic::{solve_ergodic, solve_system_ergodic, ErgodicOptions, ErgodicSolution};
use crate::forward::{solve_cauchy, solve_system_cauchy, step_plan, SolveOptions, SpatialOperator, Trajectory};
use crate::grid::{frobenius_sq, second_derivative_values, PeriodicGrid, ScalarField};
use crate::problem::{ProblemSpec, Profile};
use crate::{Error, Result};

/// Formats with 17 significant digits.
pub fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Trapezoid rule over possibly nonuniform nodes.
pub fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    times.windows(2).zip(values.windows(2)).map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1])).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
}

/// Least-squares line through `(ln x, ln y)`, skipping non-positive or
/// non-finite pairs. Needs at least 3 usable points.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Result<LogLogFit> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::InsufficientData(pts.len()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData(1));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>() / n).sqrt();
    Ok(LogLogFit { slope, intercept, residual })
}

/// `E(t_n) = ⟨G(w(t_n)), σ(t_n)⟩` at every stored time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyTrace {
    pub times: Vec<f64>,
    pub energy: Vec<f64>,
    /// `max_n |E(t_n) − E(t_0)|`.
    pub drift: f64,
}

impl EnergyTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,energy\n");
        for (t, e) in self.times.iter().zip(&self.energy) {
            out.push_str(&format!("{},{}\n", fmt_num(*t), fmt_num(*e)));
        }
        out
    }
}

fn check_alignment(traj: &Trajectory, adjoint: &AdjointDensity) -> Result<()> {
    if traj.times != adjoint.times || traj.grid != adjoint.grid {
        return Err(Error::Mismatch("forward and adjoint time grids differ".into()));
    }
    Ok(())
}

fn pair(grid: PeriodicGrid, a: &[f64], b: &[f64]) -> f64 {
    grid.cell_volume() * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

pub fn energy_trace(linearization: &Linearization<'_>, adjoint: &AdjointDensity) -> Result<EnergyTrace> {
    let traj = linearization.trajectory();
    check_alignment(traj, adjoint)?;
    let op = linearization.stepper().operator();
    let energy: Vec<f64> =
        traj.states.iter().zip(&adjoint.states).map(|(w, s)| pair(traj.grid, &op.residual(w), s)).collect();
    let drift = energy.iter().map(|e| (e - energy[0]).abs()).fold(0.0, f64::max);
    Ok(EnergyTrace { times: traj.times.clone(), energy, drift })
}

/// Both sides of the representation of `ε w_t` at the source node and final
/// time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Representation {
    /// `ε w_t(x₀, T) = −G(w(T))(x₀)`.
    pub lhs: f64,
    /// `−(1/T) ∫₀ᵀ E(t) dt` by the trapezoid rule over stored steps.
    pub rhs: f64,
    pub gap: f64,
}

pub fn representation(linearization: &Linearization<'_>, adjoint: &AdjointDensity) -> Result<Representation> {
    let traj = linearization.trajectory();
    let trace = energy_trace(linearization, adjoint)?;
    let g = linearization.stepper().operator().residual(traj.last());
    let lhs = -g[adjoint.component * traj.grid.len() + adjoint.source];
    let rhs = -trapezoid(&trace.times, &trace.energy) / traj.final_time();
    Ok(Representation { lhs, rhs, gap: (lhs - rhs).abs() })
}

/// Builds the adjoint from a Dirac at `source` (component 0) and evaluates
/// the representation.
pub fn representation_check(traj: &Trajectory, source: usize) -> Result<Representation> {
    let lin = linearize(traj)?;
    let sigma =
        if traj.components() == 1 { solve_adjoint(&lin, source)? } else { solve_system_adjoint(&lin, source, 0)? };
    representation(&lin, &sigma)
}

pub const I1: &str = "I1";
pub const I2: &str = "I2";
pub const II: &str = "II";
pub const HESSIAN_ENERGY: &str = "weighted_hessian";
pub const GENERAL_1: &str = "general_1";
pub const GENERAL_2: &str = "general_2";
pub const COUPLING_PAIR: &str = "coupling_pair";
pub const COUPLING_CHAIN: &str = "coupling_chain";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub epsilon: f64,
    pub entries: Vec<Estimate>,
}

impl EstimateReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.value)
    }

    fn push(&mut self, name: &str, value: f64) {
        self.entries.push(Estimate { name: name.into(), value });
    }
}

/// Diffusion matrix at a node; unused entries are zero in one dimension.
fn diffusion_matrix(problem: &ProblemSpec, grid: PeriodicGrid, k: usize) -> [f64; 3] {
    let a = problem.diffusion.matrix_at(grid.coords(k));
    if grid.dim() == 1 {
        [a[0], 0.0, 0.0]
    } else {
        a
    }
}

/// `tr(A Z²)` for symmetric `A`, `Z` stored as `[m11, m12, m22]`.
fn trace_a_square(a: [f64; 3], z: [f64; 3]) -> f64 {
    let zz = [z[0] * z[0] + z[1] * z[1], z[0] * z[1] + z[1] * z[2], z[1] * z[1] + z[2] * z[2]];
    a[0] * zz[0] + 2.0 * a[1] * zz[1] + a[2] * zz[2]
}

fn check_inputs(traj: &Trajectory, ergodic: &ErgodicSolution, adjoint: &AdjointDensity) -> Result<()> {
    check_alignment(traj, adjoint)?;
    if ergodic.grid() != traj.grid || ergodic.corrector.len() != traj.components() {
        return Err(Error::Mismatch("ergodic solution does not match the trajectory".into()));
    }
    let eta = traj.problem.eta;
    if (ergodic.eta - eta).abs() > 1e-15 * eta.max(1e-300) && ergodic.eta != eta {
        return Err(Error::Mismatch(format!(
            "ergodic solution computed at eta = {:e}, trajectory uses {:e}",
            ergodic.eta, eta
        )));
    }
    Ok(())
}

/// Space-time integrals of the deviation `w − v` and of `D²w` against `σ`.
/// Scalar problems use component 0; matrix problems add the general-case
/// quadratic forms.
pub fn key_estimates(traj: &Trajectory, ergodic: &ErgodicSolution, adjoint: &AdjointDensity) -> Result<EstimateReport> {
    check_inputs(traj, ergodic, adjoint)?;
    let grid = traj.grid;
    let problem = &traj.problem;
    let eps = problem.epsilon;
    let n = grid.len();
    let v = ergodic.corrector[0].values();
    let a: Vec<[f64; 3]> = (0..n).map(|k| diffusion_matrix(problem, grid, k)).collect();
    let matrix = problem.diffusion.is_matrix();
    let inv2h = 0.5 / grid.spacing();

    let mut series = vec![[0.0f64; 6]; traj.len()];
    for (idx, (state, sigma)) in traj.states.iter().zip(&adjoint.states).enumerate() {
        let w = &state[..n];
        let s = &sigma[..n];
        let z: Vec<f64> = w.iter().zip(v).map(|(a, b)| a - b).collect();
        let d2z = second_derivative_values(grid, &z);
        let d2w = second_derivative_values(grid, w);
        let mut acc = [0.0; 6];
        for k in 0..n {
            let mut grad2 = 0.0;
            for axis in 0..grid.dim() {
                let d = (z[grid.shift(k, axis, 1)] - z[grid.shift(k, axis, -1)]) * inv2h;
                grad2 += d * d;
            }
            let hz = frobenius_sq(d2z[k]);
            let tr_a = a[k][0] + a[k][2];
            let scalar_a = if matrix { 0.0 } else { a[k][0] };
            let q = [
                grad2,
                hz,
                scalar_a * scalar_a * hz,
                (scalar_a + problem.eta) * frobenius_sq(d2w[k]),
                trace_a_square(a[k], d2w[k]),
                tr_a * trace_a_square(a[k], d2z[k]),
            ];
            for (slot, qi) in acc.iter_mut().zip(q) {
                *slot += qi * s[k];
            }
        }
        series[idx] = acc.map(|x| x * grid.cell_volume());
    }
    let integral = |j: usize| trapezoid(&traj.times, &series.iter().map(|r| r[j]).collect::<Vec<_>>());
    let mut report = EstimateReport { epsilon: eps, entries: Vec::new() };
    report.push(I1, integral(0) / eps);
    report.push(I2, eps.powi(7) * integral(1));
    if matrix {
        report.push(GENERAL_1, integral(4));
        report.push(GENERAL_2, integral(5));
    } else {
        report.push(II, integral(2));
        report.push(HESSIAN_ENERGY, integral(3));
    }
    Ok(report)
}

/// Coupling deviations against the adjoint densities:
/// `∬ [(w₁−v₁) − (w₂−v₂)]² (σ₁+σ₂)` for two equations and
/// `∬ Σ_i Σ_j |c_ij| [(w_j−v_j) − (w_i−v_i)]² σ_i` in general.
pub fn coupling_estimate(
    traj: &Trajectory,
    ergodic: &ErgodicSolution,
    adjoint: &AdjointDensity,
) -> Result<EstimateReport> {
    check_inputs(traj, ergodic, adjoint)?;
    let coupling = traj
        .problem
        .coupling
        .as_ref()
        .ok_or_else(|| Error::Config("coupling estimate needs a coupled problem".into()))?;
    let grid = traj.grid;
    let n = grid.len();
    let m = coupling.size();
    let v = ergodic.stacked();
    let mut pair_series = Vec::with_capacity(traj.len());
    let mut chain_series = Vec::with_capacity(traj.len());
    for (state, sigma) in traj.states.iter().zip(&adjoint.states) {
        let z: Vec<f64> = state.iter().zip(&v).map(|(a, b)| a - b).collect();
        let mut pair_acc = 0.0;
        let mut chain_acc = 0.0;
        for k in 0..n {
            if m == 2 {
                let d = z[k] - z[n + k];
                pair_acc += d * d * (sigma[k] + sigma[n + k]);
            }
            for i in 0..m {
                for j in (0..m).filter(|&j| j != i) {
                    let d = z[j * n + k] - z[i * n + k];
                    chain_acc += coupling.get(i, j).abs() * d * d * sigma[i * n + k];
                }
            }
        }
        pair_series.push(pair_acc * grid.cell_volume());
        chain_series.push(chain_acc * grid.cell_volume());
    }
    let mut report = EstimateReport { epsilon: traj.problem.epsilon, entries: Vec::new() };
    if m == 2 {
        report.push(COUPLING_PAIR, trapezoid(&traj.times, &pair_series));
    }
    report.push(COUPLING_CHAIN, trapezoid(&traj.times, &chain_series));
    Ok(report)
}

/// Measured values against `ε` with a log-log fit and the smallest envelope
/// constant `C` such that `value ≤ C ε^exponent` on every row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub epsilons: Vec<f64>,
    pub values: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub fit_residual: f64,
    pub exponent: f64,
    pub envelope_constant: f64,
}

impl RateFit {
    pub fn new(epsilons: Vec<f64>, values: Vec<f64>, exponent: f64) -> Result<Self> {
        if epsilons.len() != values.len() {
            return Err(Error::Mismatch("rate fit needs one value per epsilon".into()));
        }
        let fit = fit_loglog(&epsilons, &values)?;
        Ok(Self {
            envelope_constant: envelope_constant(&epsilons, &values, exponent),
            epsilons,
            values,
            slope: fit.slope,
            intercept: fit.intercept,
            fit_residual: fit.residual,
            exponent,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epsilon,value\n");
        for (e, v) in self.epsilons.iter().zip(&self.values) {
            out.push_str(&format!("{},{}\n", fmt_num(*e), fmt_num(*v)));
        }
        out
    }
}

/// `max value/ε^exponent`.
pub fn envelope_constant(epsilons: &[f64], values: &[f64], exponent: f64) -> f64 {
    epsilons.iter().zip(values).map(|(e, v)| v / e.powf(exponent)).fold(0.0, f64::max)
}

/// `true` when no consecutive pair (in sweep order) more than doubles.
pub fn no_doubling(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] <= 2.0 * w[0] || w[1] <= 1e-300)
}

/// Initial data for sweeps.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialData {
    /// One profile per component.
    Profiles(Vec<Profile>),
    /// The ergodic corrector of each row's problem.
    Corrector,
}

/// Everything the pipeline computes at one `ε`.
#[derive(Debug, Clone, Serialize)]
pub struct PipelineRow {
    pub epsilon: f64,
    pub eta: f64,
    pub dt: f64,
    pub steps: usize,
    pub source: usize,
    pub component: usize,
    /// Ergodic constant of the cell solution, when one was supplied.
    pub hbar: Option<f64>,
    /// `ε ‖w_t(·, T)‖∞` over all components.
    pub rate_value: f64,
    pub energy_drift: f64,
    pub representation: Representation,
    pub max_mass_error: f64,
    pub min_density: f64,
    pub estimates: EstimateReport,
    #[serde(skip)]
    pub energy: EnergyTrace,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineOptions {
    pub solve: SolveOptions,
    pub ergodic: ErgodicOptions,
    /// Rescaled final time of the forward window.
    pub horizon: f64,
    /// Adjoint source node; `None` picks the node of largest `|ε w_t(·, T)|`.
    pub source: Option<usize>,
    /// Component carrying the adjoint source.
    pub component: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            solve: SolveOptions::default(),
            ergodic: ErgodicOptions::default(),
            horizon: 1.0,
            source: None,
            component: 0,
        }
    }
}

fn initial_fields(
    data: &InitialData,
    grid: PeriodicGrid,
    ergodic: Option<&ErgodicSolution>,
    components: usize,
) -> Result<Vec<ScalarField>> {
    match data {
        InitialData::Corrector => ergodic
            .map(|e| e.corrector.clone())
            .ok_or_else(|| Error::Config("corrector initial data needs an ergodic solution".into())),
        InitialData::Profiles(p) => {
            if p.len() != components {
                return Err(Error::Mismatch(format!("{} initial profiles for {components} equations", p.len())));
            }
            p.iter().map(|prof| prof.validate().map(|_| prof.sample(grid))).collect()
        }
    }
}

fn solve_cell(problem: &ProblemSpec, grid: PeriodicGrid, options: ErgodicOptions) -> Result<ErgodicSolution> {
    if problem.coupling.is_some() {
        solve_system_ergodic(problem, grid, options)
    } else {
        solve_ergodic(problem, grid, options)
    }
}

fn solve_forward(
    problem: &ProblemSpec,
    u0: &[ScalarField],
    horizon: f64,
    options: SolveOptions,
) -> Result<(Trajectory, crate::forward::SolveReport)> {
    if problem.coupling.is_some() {
        solve_system_cauchy(problem, u0, horizon, options)
    } else {
        match u0 {
            [single] => solve_cauchy(problem, single, horizon, options),
            _ => Err(Error::Mismatch(format!("{} initial fields for a scalar problem", u0.len()))),
        }
    }
}

/// Solves the forward, cell and adjoint problems at one `ε` (with `η = ε⁴`)
/// and evaluates every identity and estimate on them.
pub fn pipeline_row(
    family: &ProblemSpec,
    grid: PeriodicGrid,
    epsilon: f64,
    initial: &InitialData,
    options: PipelineOptions,
) -> Result<PipelineRow> {
    let problem = family.clone().at_epsilon(epsilon);
    let ergodic = solve_cell(&problem, grid, options.ergodic)?;
    pipeline_row_with(&problem, grid, Some(&ergodic), initial, options)
}

/// [`pipeline_row`] for a problem already set to its `ε` and `η`, reusing a
/// cell solution computed at the same `η`. Without a cell solution only the
/// forward and adjoint quantities are evaluated and `estimates` is empty.
pub fn pipeline_row_with(
    problem: &ProblemSpec,
    grid: PeriodicGrid,
    ergodic: Option<&ErgodicSolution>,
    initial: &InitialData,
    options: PipelineOptions,
) -> Result<PipelineRow> {
    let coupled = problem.coupling.is_some();
    let u0 = initial_fields(initial, grid, ergodic, problem.components())?;
    let (traj, report) = solve_forward(problem, &u0, options.horizon, options.solve.with_stride(1))?;
    let lin = linearize(&traj)?;
    let g_final = lin.stepper().operator().residual(traj.last());
    let n = grid.len();
    let component = options.component;
    if component >= problem.components() {
        return Err(Error::Config(format!("component {component} out of range")));
    }
    let source = match options.source {
        Some(node) if node >= n => return Err(Error::Config(format!("source node {node} out of range"))),
        Some(node) => node,
        None => argmax_abs(&g_final[component * n..(component + 1) * n]),
    };
    let sigma = if coupled { solve_system_adjoint(&lin, source, component)? } else { solve_adjoint(&lin, source)? };
    let energy = energy_trace(&lin, &sigma)?;
    let rep = representation(&lin, &sigma)?;
    let mut estimates = EstimateReport { epsilon: problem.epsilon, entries: Vec::new() };
    if let Some(ergodic) = ergodic {
        estimates = key_estimates(&traj, ergodic, &sigma)?;
        if coupled {
            estimates.entries.extend(coupling_estimate(&traj, ergodic, &sigma)?.entries);
        }
    }
    Ok(PipelineRow {
        epsilon: problem.epsilon,
        eta: problem.eta,
        dt: traj.dt,
        steps: report.steps,
        source,
        component,
        hbar: ergodic.map(|e| e.ergodic_constant),
        rate_value: g_final.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        energy_drift: energy.drift,
        representation: rep,
        max_mass_error: sigma.max_mass_error(),
        min_density: sigma.min_value(),
        estimates,
        energy,
    })
}

/// `ε‖w_t(·, T)‖∞` per `ε` with an envelope against `ε^exponent`.
pub fn rate_sweep(
    family: &ProblemSpec,
    grid: PeriodicGrid,
    epsilons: &[f64],
    initial: &InitialData,
    exponent: f64,
    options: PipelineOptions,
) -> Result<RateFit> {
    let values = epsilons
        .iter()
        .map(|&eps| {
            let problem = family.clone().at_epsilon(eps);
            let ergodic = match initial {
                InitialData::Corrector => Some(solve_cell(&problem, grid, options.ergodic)?),
                InitialData::Profiles(_) => None,
            };
            rate_value(&problem, grid, initial, ergodic.as_ref(), options)
        })
        .collect::<Result<Vec<_>>>()?;
    RateFit::new(epsilons.to_vec(), values, exponent)
}

/// `ε‖w_t(·, T)‖∞` for one problem already set to its `ε`.
pub fn rate_value(
    problem: &ProblemSpec,
    grid: PeriodicGrid,
    initial: &InitialData,
    ergodic: Option<&ErgodicSolution>,
    options: PipelineOptions,
) -> Result<f64> {
    let u0 = initial_fields(initial, grid, ergodic, problem.components())?;
    let (traj, _) = solve_forward(problem, &u0, options.horizon, options.solve.with_stride(usize::MAX))?;
    let g = SpatialOperator::new(problem, grid)?.residual(traj.last());
    Ok(g.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// `‖u^ε(·, T) − w^ε(·, T)‖∞` between the unregularized (`η = 0`) and the
/// regularized (`η = ε⁴`) solves from the same data.
pub fn closeness_check(
    family: &ProblemSpec,
    epsilon: f64,
    u0: &[ScalarField],
    options: PipelineOptions,
) -> Result<f64> {
    let regularized = family.clone().at_epsilon(epsilon);
    let plain = regularized.clone().with_eta(0.0);
    let solve = options.solve.with_stride(usize::MAX);
    let a = solve_forward(&plain, u0, options.horizon, solve)?.0;
    let b = solve_forward(&regularized, u0, options.horizon, solve)?.0;
    Ok(a.last().iter().zip(b.last()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// Distances to the ergodic profile at integer times.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LongTimeSeries {
    pub times: Vec<f64>,
    /// `min_k ‖u(·,t) + H̄t − (v + k)‖∞`.
    pub adjusted_distance: Vec<f64>,
    /// `‖u(·,t) − (v − H̄t)‖∞`.
    pub distance: Vec<f64>,
    /// `distance` did not grow since the previous integer time, up to the
    /// slack allowed by the corrector residual.
    pub non_increasing: Vec<bool>,
}

impl LongTimeSeries {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,adjusted_distance,distance,non_increasing\n");
        for i in 0..self.times.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                fmt_num(self.times[i]),
                fmt_num(self.adjusted_distance[i]),
                fmt_num(self.distance[i]),
                self.non_increasing[i]
            ));
        }
        out
    }
}

/// Runs the unrescaled equation (`ε = 1`) to integer time `t_final` and
/// compares with `v − H̄t`.
pub fn large_time_convergence(
    problem: &ProblemSpec,
    u0: &[ScalarField],
    t_final: usize,
    reference: &ErgodicSolution,
    options: SolveOptions,
) -> Result<LongTimeSeries> {
    let unit = problem.clone().with_epsilon(1.0);
    if (reference.eta - unit.eta).abs() > 0.0 {
        return Err(Error::Mismatch("reference corrector computed at a different eta".into()));
    }
    let grid = u0.first().ok_or_else(|| Error::Config("no initial data".into()))?.grid();
    let op = SpatialOperator::new(&unit, grid)?;
    let (per_unit, dt) = step_plan(1.0, options.dt.unwrap_or_else(|| op.cfl_time_step()));
    let solve = SolveOptions { dt: Some(dt), stored_every: per_unit, solver_tolerance: options.solver_tolerance };
    let (traj, _) = solve_forward(&unit, u0, t_final as f64, solve)?;
    let v = reference.stacked();
    let c = reference.ergodic_constant;
    // A corrector residual r lets v − H̄t drift by at most r per unit time.
    let slack = reference.residual + 1e-12;
    let mut series = LongTimeSeries {
        times: Vec::new(),
        adjusted_distance: Vec::new(),
        distance: Vec::new(),
        non_increasing: Vec::new(),
    };
    for (t, state) in traj.times.iter().zip(&traj.states) {
        let diff: Vec<f64> = state.iter().zip(&v).map(|(u, vk)| u + c * t - vk).collect();
        let hi = diff.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = diff.iter().copied().fold(f64::INFINITY, f64::min);
        let dist = diff.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let ok = series.distance.last().is_none_or(|prev| dist <= prev + slack);
        series.times.push(*t);
        series.adjusted_distance.push(0.5 * (hi - lo));
        series.distance.push(dist);
        series.non_increasing.push(ok);
    }
    Ok(series)
}

/// One line of the JSON summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryEntry {
    pub quantity: String,
    pub epsilon: Option<f64>,
    pub value: f64,
    pub bound_constant: Option<f64>,
    pub slope: Option<f64>,
}

impl SummaryEntry {
    pub fn new(quantity: impl Into<String>, epsilon: Option<f64>, value: f64) -> Self {
        Self { quantity: quantity.into(), epsilon, value, bound_constant: None, slope: None }
    }
}

/// Per-`ε` rows of estimates as CSV; columns follow the first report.
pub fn estimates_to_csv(reports: &[EstimateReport]) -> String {
    let Some(first) = reports.first() else { return String::from("epsilon\n") };
    let names: Vec<&str> = first.entries.iter().map(|e| e.name.as_str()).collect();
    let mut out = format!("epsilon,{}\n", names.join(","));
    for r in reports {
        let cells: Vec<String> = names.iter().map(|n| fmt_num(r.get(n).unwrap_or(f64::NAN))).collect();
        out.push_str(&format!("{},{}\n", fmt_num(r.epsilon), cells.join(",")));
    }
    out
}
