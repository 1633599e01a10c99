//! Ergodic constants and correctors by the long-time method, with
//! vanishing-viscosity sweeps.

use std::collections::VecDeque;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::fit_loglog;
use crate::forward::{step_plan, SpatialOperator, Stepper, DEFAULT_SOLVER_TOLERANCE};
use crate::grid::{PeriodicGrid, ScalarField};
use crate::problem::ProblemSpec;
use crate::{Error, Result};

/// Reference node for the normalization `v(x₀) = 0`.
pub const REFERENCE_NODE: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErgodicOptions {
    /// Target sup-norm oscillation of `u + c t` over the trailing window.
    pub tolerance: f64,
    /// Length of the trailing window in time units.
    pub window: f64,
    /// Snapshots taken per window.
    pub snapshots_per_window: usize,
    pub max_time: f64,
    /// `None` selects the monotonicity limit.
    pub dt: Option<f64>,
    pub solver_tolerance: f64,
    /// When set, a second pass reruns from the converged state with per-node
    /// gradient boxes of this margin over the observed gradients, cutting
    /// the Lax–Friedrichs dissipation where the corrector is flat.
    pub local_box: Option<f64>,
}

impl Default for ErgodicOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            window: 5.0,
            snapshots_per_window: 20,
            max_time: 2000.0,
            dt: None,
            solver_tolerance: DEFAULT_SOLVER_TOLERANCE,
            local_box: None,
        }
    }
}

impl ErgodicOptions {
    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self
    }

    pub fn with_max_time(mut self, t: f64) -> Self {
        self.max_time = t;
        self
    }

    pub fn with_local_box(mut self, margin: f64) -> Self {
        self.local_box = Some(margin);
        self
    }
}

/// Corrector(s) normalized at the reference node and the shared constant.
#[derive(Debug, Clone, PartialEq)]
pub struct ErgodicSolution {
    pub corrector: Vec<ScalarField>,
    pub ergodic_constant: f64,
    pub eta: f64,
    /// Max-node residual of the discrete cell problem.
    pub residual: f64,
}

impl ErgodicSolution {
    pub fn grid(&self) -> PeriodicGrid {
        self.corrector[0].grid()
    }

    /// Components stacked into one vector.
    pub fn stacked(&self) -> Vec<f64> {
        self.corrector.iter().flat_map(|f| f.values().iter().copied()).collect()
    }

    pub fn max_gradient(&self) -> f64 {
        use crate::grid::{gradient, GradientScheme};
        self.corrector.iter().map(|f| gradient(f, GradientScheme::Central).max_norm()).fold(0.0, f64::max)
    }
}

/// Cell problem of a scalar equation by the long-time method.
pub fn solve_ergodic(problem: &ProblemSpec, grid: PeriodicGrid, options: ErgodicOptions) -> Result<ErgodicSolution> {
    if problem.components() != 1 {
        return Err(Error::Config("coupled problems go through solve_system_ergodic".into()));
    }
    long_time(problem, grid, options)
}

/// Cell problem of a weakly coupled system; one constant shared by all
/// components.
pub fn solve_system_ergodic(
    problem: &ProblemSpec,
    grid: PeriodicGrid,
    options: ErgodicOptions,
) -> Result<ErgodicSolution> {
    if problem.coupling.is_none() {
        return Err(Error::Config("system cell problem requires a coupling matrix".into()));
    }
    long_time(problem, grid, options)
}

fn long_time(problem: &ProblemSpec, grid: PeriodicGrid, options: ErgodicOptions) -> Result<ErgodicSolution> {
    if !(options.tolerance > 0.0 && options.window > 0.0 && options.snapshots_per_window >= 2) {
        return Err(Error::Config("ergodic options need positive tolerance, window and ≥ 2 snapshots".into()));
    }
    if options.local_box.is_some_and(|m| !(m >= 1.0 && m.is_finite())) {
        return Err(Error::Config("local box margin must be at least 1".into()));
    }
    let unit = problem.clone().with_epsilon(1.0);
    let op = SpatialOperator::new(&unit, grid)?;
    let (mut w, mut c, mut stepper) = relax(op, vec![0.0; unit.components() * grid.len()], options)?;
    if let Some(margin) = options.local_box {
        let radii = local_radii(stepper.operator(), &w, margin);
        let refined = SpatialOperator::with_node_radii(&unit, grid, radii)?;
        (w, c, stepper) = relax(refined, w, options)?;
    }
    let anchor = w[REFERENCE_NODE];
    let v: Vec<f64> = w.iter().map(|x| x - anchor).collect();
    let g = stepper.operator().residual(&v);
    let residual = g.iter().map(|gk| (gk - c).abs()).fold(0.0, f64::max);
    let limit = 10.0 * options.tolerance;
    if residual > limit {
        return Err(Error::ErgodicVerification { residual, limit });
    }
    let n = grid.len();
    let corrector =
        (0..unit.components()).map(|i| ScalarField::from_raw(grid, v[i * n..(i + 1) * n].to_vec())).collect();
    Ok(ErgodicSolution { corrector, ergodic_constant: c, eta: problem.eta, residual })
}

/// Per-node box radii hugging the gradients of `w`: `margin` times the
/// largest central gradient over the node and its axis neighbors, plus a
/// floor of 2% of the global radius, capped by the global radius.
fn local_radii(op: &SpatialOperator, w: &[f64], margin: f64) -> Vec<f64> {
    let grid = op.grid();
    let n = grid.len();
    let global = op.problem().gradient_bound;
    let norms: Vec<f64> = (0..w.len())
        .map(|i| {
            let (c, k) = (i / n, i % n);
            let wc = &w[c * n..(c + 1) * n];
            let inv = 0.5 / grid.spacing();
            (0..grid.dim())
                .map(|axis| ((wc[grid.shift(k, axis, 1)] - wc[grid.shift(k, axis, -1)]) * inv).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    (0..w.len())
        .map(|i| {
            let (c, k) = (i / n, i % n);
            let mut m = norms[i];
            for axis in 0..grid.dim() {
                for delta in [-1, 1] {
                    m = m.max(norms[c * n + grid.shift(k, axis, delta)]);
                }
            }
            (margin * m + 0.02 * global).min(global)
        })
        .collect()
}

/// Marches from `w` at `ε = 1` until `u + c t` stops moving over the
/// trailing window; returns the last state, the constant and the stepper.
fn relax(op: SpatialOperator, mut w: Vec<f64>, options: ErgodicOptions) -> Result<(Vec<f64>, f64, Stepper)> {
    let interval = options.window / options.snapshots_per_window as f64;
    let (per_snapshot, dt) = step_plan(interval, options.dt.unwrap_or_else(|| op.cfl_time_step()));
    let stepper = Stepper::new(op, dt, options.solver_tolerance)?;
    let len = w.len();
    let mean = |w: &[f64]| w.iter().sum::<f64>() / len as f64;
    let mut window: VecDeque<(f64, Vec<f64>)> = VecDeque::new();
    window.push_back((0.0, w.clone()));
    let mut step = 0usize;
    let mut oscillation = f64::INFINITY;
    let mut snapshot = 0usize;
    loop {
        for _ in 0..per_snapshot {
            w = stepper.step(&w, step)?.state;
            step += 1;
        }
        snapshot += 1;
        let t = snapshot as f64 * interval;
        window.push_back((t, w.clone()));
        if window.len() > options.snapshots_per_window + 1 {
            window.pop_front();
        }
        if window.len() == options.snapshots_per_window + 1 {
            let (t0, first) = window.front().expect("window is full");
            let c = -(mean(&w) - mean(first)) / (t - t0);
            oscillation = window
                .iter()
                .map(|(ts, ws)| ws.iter().zip(&w).map(|(a, b)| ((a + c * ts) - (b + c * t)).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            if oscillation < options.tolerance {
                return Ok((w, c, stepper));
            }
        }
        if t >= options.max_time {
            return Err(Error::ErgodicNonConvergence { time: t, oscillation });
        }
    }
}

/// Shifts every Hamiltonian of `family` by minus the ergodic constant of the
/// unregularized (`η = 0`) discrete problem, so that the limit constant is
/// zero. Returns the shifted family and the removed constant.
pub fn normalize_constant(
    family: &ProblemSpec,
    grid: PeriodicGrid,
    options: ErgodicOptions,
) -> Result<(ProblemSpec, f64)> {
    let plain = family.clone().with_eta(0.0);
    let c = long_time(&plain, grid, options)?.ergodic_constant;
    Ok((family.shifted(-c), c))
}

/// Discounted approximation `δ u + G(u) = 0`, marched to steady state in
/// pseudo-time; returns `−δ·mean(u)`, which tends to the ergodic constant as
/// `δ → 0`. Cross-check only.
pub fn discounted_constant(
    problem: &ProblemSpec,
    grid: PeriodicGrid,
    discount: f64,
    tolerance: f64,
    max_time: f64,
) -> Result<f64> {
    if !(discount > 0.0) {
        return Err(Error::Config("discount must be positive".into()));
    }
    let unit = problem.clone().with_epsilon(1.0);
    let op = SpatialOperator::new(&unit, grid)?;
    let dt = op.cfl_time_step().min(0.5 / discount);
    let stepper = Stepper::new(op, dt, DEFAULT_SOLVER_TOLERANCE)?;
    let len = unit.components() * grid.len();
    let mut u = vec![0.0; len];
    let mut t = 0.0;
    let mut step = 0;
    while t < max_time {
        // The explicit zero-order term rides along with F.
        let (f, _) = stepper.operator().numerical_hamiltonian(&u);
        let rhs: Vec<f64> = u.iter().zip(&f).map(|(uk, fk)| uk - stepper.tau() * (fk + discount * uk)).collect();
        let (next, _) = stepper.solve_implicit(&rhs)?;
        let change = next.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / dt;
        u = next;
        t += dt;
        step += 1;
        if change < tolerance {
            return Ok(-discount * u.iter().sum::<f64>() / len as f64);
        }
    }
    Err(Error::ErgodicNonConvergence { time: t, oscillation: step as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub eta: f64,
    #[serde(rename = "Hbar")]
    pub hbar: f64,
    pub grad_norm: f64,
    pub residual: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepFailure {
    pub epsilon: f64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub failures: Vec<SweepFailure>,
    /// Correctors of the successful rows, aligned with `rows`.
    pub solutions: Vec<ErgodicSolution>,
}

pub const SWEEP_COLUMNS: [&str; 6] = ["epsilon", "eta", "Hbar", "grad_norm", "residual", "wall_time"];

impl SweepTable {
    /// Richardson extrapolation from the two smallest `ε`, assuming an
    /// `ε²` leading error.
    pub fn extrapolated_constant(&self) -> Option<f64> {
        let mut rows: Vec<&SweepRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
        let [.., coarse, fine] = rows.as_slice() else { return None };
        let r2 = (coarse.epsilon / fine.epsilon).powi(2);
        Some((r2 * fine.hbar - coarse.hbar) / (r2 - 1.0))
    }

    /// Least-squares slope of `log|H̄_ε − c|` against `log ε`.
    pub fn slope(&self, c: f64) -> Result<f64> {
        let eps: Vec<f64> = self.rows.iter().map(|r| r.epsilon).collect();
        let err: Vec<f64> = self.rows.iter().map(|r| (r.hbar - c).abs()).collect();
        Ok(fit_loglog(&eps, &err)?.slope)
    }

    /// `max/min − 1` of the corrector gradient norms.
    pub fn gradient_variation(&self) -> f64 {
        let max = self.rows.iter().map(|r| r.grad_norm).fold(0.0, f64::max);
        let min = self.rows.iter().map(|r| r.grad_norm).fold(f64::INFINITY, f64::min);
        max / min - 1.0
    }

    pub fn to_csv(&self) -> String {
        self.to_csv_with(true)
    }

    /// Without timings the `wall_time` cells are left empty, which keeps
    /// reruns byte-identical.
    pub fn to_csv_with(&self, timings: bool) -> String {
        use crate::analysis::fmt_num;
        let mut out = SWEEP_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let mut cells: Vec<String> = [r.epsilon, r.eta, r.hbar, r.grad_norm, r.residual].map(fmt_num).to_vec();
            cells.push(if timings { fmt_num(r.wall_time) } else { String::new() });
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Ergodic solves at `η = ε⁴` for each `ε`, in parallel.
pub fn viscosity_sweep(
    family: &ProblemSpec,
    grid: PeriodicGrid,
    epsilons: &[f64],
    options: ErgodicOptions,
) -> Result<SweepTable> {
    if epsilons.is_empty() {
        return Err(Error::Config("epsilon list is empty".into()));
    }
    if epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::Config("epsilon values must be positive".into()));
    }
    let results: Vec<(f64, Result<(ErgodicSolution, f64)>)> = epsilons
        .par_iter()
        .map(|&eps| {
            let start = Instant::now();
            let problem = family.clone().at_epsilon(eps);
            let solved = if problem.coupling.is_some() {
                solve_system_ergodic(&problem, grid, options)
            } else {
                solve_ergodic(&problem, grid, options)
            };
            (eps, solved.map(|s| (s, start.elapsed().as_secs_f64())))
        })
        .collect();
    let mut table = SweepTable { rows: Vec::new(), failures: Vec::new(), solutions: Vec::new() };
    for (eps, r) in results {
        match r {
            Ok((s, wall)) => {
                table.rows.push(SweepRow {
                    epsilon: eps,
                    eta: s.eta,
                    hbar: s.ergodic_constant,
                    grad_norm: s.max_gradient(),
                    residual: s.residual,
                    wall_time: wall,
                });
                table.solutions.push(s);
            }
            Err(e) => table.failures.push(SweepFailure { epsilon: eps, error: e.to_string() }),
        }
    }
    Ok(table)
}
