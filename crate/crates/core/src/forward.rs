//! IMEX time stepping for the regularized equation and weakly coupled
//! systems.
//!
//! One step of size `dt` in the rescaled time reads
//! `M w⁺ = w − τ F(w)` with `τ = dt/ε`, where `F` is the local Lax–Friedrichs
//! Hamiltonian and `M = I − τ W K + τ C ⊗ I` carries the diffusion and the
//! coupling. The state of an `m`-component system is stored component-major
//! in one vector of length `m·N^dim`.

use std::sync::Arc;
use std::time::Instant;

use crate::grid::{integrate_values, PeriodicGrid, ScalarField};
use crate::linalg::{CoupledDiffusion, CsrMatrix, ShiftedDiffusion};
use crate::problem::{HamiltonianSpec, LocalHamiltonian, ProblemSpec};
use crate::{Error, Result};

/// Default relative tolerance of the implicit solves.
pub const DEFAULT_SOLVER_TOLERANCE: f64 = 1e-12;

/// Three-point Gauss–Legendre rule on `[0, 1]`.
const GAUSS_NODES: [f64; 3] = [0.112_701_665_379_258_31, 0.5, 0.887_298_334_620_741_7];
const GAUSS_WEIGHTS: [f64; 3] = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];

/// Slack on the gradient-box test, relative to the box radius.
const BOX_SLACK: f64 = 1e-12;

/// Spatial part of the scheme: numerical Hamiltonian, diffusion stencil and
/// coupling. Independent of the time step.
#[derive(Debug, Clone)]
pub struct SpatialOperator {
    grid: PeriodicGrid,
    problem: ProblemSpec,
    /// Per component, per node.
    local: Vec<Vec<LocalHamiltonian>>,
    /// Lax–Friedrichs dissipation per component, per node, per axis.
    alpha: Vec<Vec<[f64; 2]>>,
    /// Gradient-box radius per stacked node.
    radius: Vec<f64>,
    stencil: Arc<CsrMatrix>,
    weight: Vec<f64>,
}

impl SpatialOperator {
    pub fn new(problem: &ProblemSpec, grid: PeriodicGrid) -> Result<Self> {
        Self::build(problem, grid, None)
    }

    /// Operator whose gradient box has its own radius at every node of every
    /// component (stacked like the state). Dissipation follows the radius, so
    /// tighter boxes mean less numerical viscosity; the scheme stays monotone
    /// only while each central gradient stays inside its box.
    pub fn with_node_radii(problem: &ProblemSpec, grid: PeriodicGrid, radii: Vec<f64>) -> Result<Self> {
        Self::build(problem, grid, Some(radii))
    }

    fn build(problem: &ProblemSpec, grid: PeriodicGrid, radii: Option<Vec<f64>>) -> Result<Self> {
        problem.validate(grid.dim())?;
        let len = problem.components() * grid.len();
        let radius = match radii {
            None => vec![problem.gradient_bound; len],
            Some(r) if r.len() != len => {
                return Err(Error::Mismatch(format!("{} box radii for {len} unknowns", r.len())))
            }
            Some(r) => {
                if r.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                    return Err(Error::Config("box radii must be positive and finite".into()));
                }
                r
            }
        };
        let diffusion = &problem.diffusion;
        let matrix = diffusion.is_matrix();
        let drift: Vec<[f64; 2]> =
            grid.nodes().map(|x| if matrix { diffusion.divergence(x) } else { [0.0; 2] }).collect();
        let (stencil, weight) = if matrix {
            (matrix_stencil(grid, problem), vec![1.0; grid.len()])
        } else {
            let w = grid.nodes().map(|x| diffusion.scalar_jet(x).map_or(0.0, |j| j.value) + problem.eta).collect();
            (laplacian_stencil(grid), w)
        };
        let local: Vec<Vec<LocalHamiltonian>> = problem
            .hamiltonians
            .iter()
            .map(|h| grid.nodes().zip(&drift).map(|(x, d)| h.localize(x, *d)).collect())
            .collect();
        let n = grid.len();
        let alpha = local
            .iter()
            .enumerate()
            .map(|(c, row)| {
                row.iter()
                    .enumerate()
                    .map(|(k, h)| {
                        let s = h.slope_bound(radius[c * n + k]);
                        if grid.dim() == 1 {
                            [s[0], 0.0]
                        } else {
                            s
                        }
                    })
                    .collect()
            })
            .collect();
        let mut op = Self { grid, problem: problem.clone(), local, alpha, radius, stencil: Arc::new(stencil), weight };
        op.apply_discrete_corrections()?;
        Ok(op)
    }

    /// Adds to each manufactured Hamiltonian flagged for it the nodal
    /// potential that makes its sampled corrector an exact zero of the
    /// uncoupled residual with `η = 0`.
    fn apply_discrete_corrections(&mut self) -> Result<()> {
        let flagged: Vec<(usize, crate::problem::TrigPoly)> = self
            .problem
            .hamiltonians
            .iter()
            .enumerate()
            .filter_map(|(i, h)| match h {
                HamiltonianSpec::Manufactured { corrector, discrete_correction: true, .. } => {
                    Some((i, corrector.clone()))
                }
                _ => None,
            })
            .collect();
        if flagged.is_empty() {
            return Ok(());
        }
        let mut base = self.problem.clone().with_eta(0.0);
        for h in base.hamiltonians.iter_mut() {
            if let HamiltonianSpec::Manufactured { discrete_correction, .. } = h {
                *discrete_correction = false;
            }
        }
        let reference = SpatialOperator::build(&base, self.grid, Some(self.radius.clone()))?;
        for (i, corrector) in flagged {
            let v = corrector.sample(self.grid);
            let g = reference.component_residual(i, v.values());
            for (h, gk) in self.local[i].iter_mut().zip(g) {
                h.add_offset(-gk);
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> PeriodicGrid {
        self.grid
    }

    pub fn problem(&self) -> &ProblemSpec {
        &self.problem
    }

    pub fn components(&self) -> usize {
        self.local.len()
    }

    pub fn stencil(&self) -> &Arc<CsrMatrix> {
        &self.stencil
    }

    /// Diagonal weight `W` multiplying the stencil.
    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn max_alpha(&self) -> f64 {
        self.alpha.iter().flatten().flat_map(|a| a.iter().copied()).fold(0.0, f64::max)
    }

    /// Largest stable step for monotonicity: `0.5·ε·h / max α`.
    pub fn cfl_time_step(&self) -> f64 {
        0.5 * self.problem.epsilon * self.grid.spacing() / self.max_alpha()
    }

    fn central(&self, w: &[f64], k: usize) -> [f64; 2] {
        let g = self.grid;
        let inv = 0.5 / g.spacing();
        let mut p = [0.0; 2];
        for (axis, slot) in p.iter_mut().enumerate().take(g.dim()) {
            *slot = (w[g.shift(k, axis, 1)] - w[g.shift(k, axis, -1)]) * inv;
        }
        p
    }

    /// Lax–Friedrichs Hamiltonian of one component, returning the largest
    /// central-gradient norm seen.
    fn component_hamiltonian(&self, c: usize, w: &[f64], out: &mut [f64]) -> f64 {
        let g = self.grid;
        let inv2h = 0.5 / g.spacing();
        let mut max_grad = 0.0f64;
        for k in 0..g.len() {
            let p = self.central(w, k);
            max_grad = max_grad.max(p[0].hypot(p[1]));
            let mut value = self.local[c][k].value(p);
            for axis in 0..g.dim() {
                let second = w[g.shift(k, axis, 1)] - 2.0 * w[k] + w[g.shift(k, axis, -1)];
                value -= self.alpha[c][k][axis] * second * inv2h;
            }
            out[k] = value;
        }
        max_grad
    }

    /// `F(w)` for the stacked state, with the largest central-gradient norm.
    pub fn numerical_hamiltonian(&self, w: &[f64]) -> (Vec<f64>, f64) {
        let n = self.grid.len();
        let mut out = vec![0.0; w.len()];
        let mut max_grad = 0.0f64;
        for c in 0..self.components() {
            let g = self.component_hamiltonian(c, &w[c * n..(c + 1) * n], &mut out[c * n..(c + 1) * n]);
            max_grad = max_grad.max(g);
        }
        (out, max_grad)
    }

    /// `F_c(w_c) − W K w_c`, i.e. the residual of one equation without
    /// coupling.
    fn component_residual(&self, c: usize, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; w.len()];
        self.component_hamiltonian(c, w, &mut out);
        let kw = self.stencil.apply(w);
        for ((o, k), wt) in out.iter_mut().zip(&kw).zip(&self.weight) {
            *o -= wt * k;
        }
        out
    }

    /// Adds `−W K w + (C ⊗ I) w` to `f`, turning `F(w)` into the residual.
    fn add_linear_terms(&self, w: &[f64], f: &mut [f64]) {
        let n = self.grid.len();
        for c in 0..self.components() {
            let kw = self.stencil.apply(&w[c * n..(c + 1) * n]);
            for k in 0..n {
                f[c * n + k] -= self.weight[k] * kw[k];
            }
        }
        if let Some(coupling) = &self.problem.coupling {
            for i in 0..self.components() {
                for k in 0..n {
                    f[i * n + k] += coupling.apply_at(i, |j| w[j * n + k]);
                }
            }
        }
    }

    /// Discrete PDE residual `G(w) = F(w) − W K w + (C ⊗ I) w`, so that
    /// `ε w_t = −G(w)`.
    pub fn residual(&self, w: &[f64]) -> Vec<f64> {
        let (mut f, _) = self.numerical_hamiltonian(w);
        self.add_linear_terms(w, &mut f);
        f
    }

    /// Largest central-gradient norm over all components.
    pub fn max_gradient(&self, w: &[f64]) -> f64 {
        let n = self.grid.len();
        (0..self.components())
            .flat_map(|c| (0..n).map(move |k| (c, k)))
            .map(|(c, k)| {
                let p = self.central(&w[c * self.grid.len()..], k);
                p[0].hypot(p[1])
            })
            .fold(0.0, f64::max)
    }

    /// First stacked node whose central gradient leaves its box, as
    /// `(node, |p|, radius)`.
    pub fn box_violation(&self, w: &[f64]) -> Option<(usize, f64, f64)> {
        let n = self.grid.len();
        (0..w.len()).find_map(|i| {
            let (c, k) = (i / n, i % n);
            let p = self.central(&w[c * n..(c + 1) * n], k);
            let norm = p[0].hypot(p[1]);
            let r = self.radius[i];
            (norm > r * (1.0 + BOX_SLACK)).then_some((i, norm, r))
        })
    }

    pub fn radii(&self) -> &[f64] {
        &self.radius
    }

    /// `D_p H̃` at the central gradient of `w`, per component and node.
    pub fn tangent_slopes(&self, w: &[f64]) -> Vec<[f64; 2]> {
        let n = self.grid.len();
        let mut out = Vec::with_capacity(w.len());
        for c in 0..self.components() {
            let wc = &w[c * n..(c + 1) * n];
            out.extend((0..n).map(|k| self.local[c][k].gradient(self.central(wc, k))));
        }
        out
    }

    /// `∫₀¹ D_p H̃ ds` along the straight path from `w0` to `w1`.
    pub fn secant_slopes(&self, w0: &[f64], w1: &[f64]) -> Vec<[f64; 2]> {
        let n = self.grid.len();
        let mut out = Vec::with_capacity(w0.len());
        for c in 0..self.components() {
            let a = &w0[c * n..(c + 1) * n];
            let b = &w1[c * n..(c + 1) * n];
            out.extend((0..n).map(|k| {
                let p0 = self.central(a, k);
                let p1 = self.central(b, k);
                let mut s = [0.0; 2];
                for (node, weight) in GAUSS_NODES.iter().zip(GAUSS_WEIGHTS) {
                    let p = [p0[0] + node * (p1[0] - p0[0]), p0[1] + node * (p1[1] - p0[1])];
                    let g = self.local[c][k].gradient(p);
                    s[0] += weight * g[0];
                    s[1] += weight * g[1];
                }
                s
            }));
        }
        out
    }

    /// Linearized transport `F'f` with the given per-node slopes.
    pub fn apply_transport(&self, slopes: &[[f64; 2]], f: &[f64]) -> Vec<f64> {
        let g = self.grid;
        let n = g.len();
        let inv2h = 0.5 / g.spacing();
        let mut out = vec![0.0; f.len()];
        for c in 0..self.components() {
            let fc = &f[c * n..(c + 1) * n];
            for k in 0..n {
                let mut acc = 0.0;
                for axis in 0..g.dim() {
                    let up = fc[g.shift(k, axis, 1)];
                    let down = fc[g.shift(k, axis, -1)];
                    let slope = slopes[c * n + k][axis] * inv2h;
                    let diss = self.alpha[c][k][axis] * inv2h;
                    acc += slope * (up - down) - diss * (up - 2.0 * fc[k] + down);
                }
                out[c * n + k] = acc;
            }
        }
        out
    }

    /// `(F')ᵀ g`, scattering each row of [`Self::apply_transport`].
    pub fn apply_transport_transpose(&self, slopes: &[[f64; 2]], gv: &[f64]) -> Vec<f64> {
        let g = self.grid;
        let n = g.len();
        let inv2h = 0.5 / g.spacing();
        let mut out = vec![0.0; gv.len()];
        for c in 0..self.components() {
            let base = c * n;
            for k in 0..n {
                let val = gv[base + k];
                for axis in 0..g.dim() {
                    let slope = slopes[base + k][axis] * inv2h;
                    let diss = self.alpha[c][k][axis] * inv2h;
                    out[base + g.shift(k, axis, 1)] += (slope - diss) * val;
                    out[base + g.shift(k, axis, -1)] += (-slope - diss) * val;
                    out[base + k] += 2.0 * diss * val;
                }
            }
        }
        out
    }
}

/// Periodic `(2·dim+1)`-point Laplacian.
fn laplacian_stencil(grid: PeriodicGrid) -> CsrMatrix {
    let inv = 1.0 / (grid.spacing() * grid.spacing());
    let mut t = Vec::with_capacity(grid.len() * (2 * grid.dim() + 1));
    for k in 0..grid.len() {
        for axis in 0..grid.dim() {
            t.push((k, grid.shift(k, axis, 1), inv));
            t.push((k, grid.shift(k, axis, -1), inv));
            t.push((k, k, -2.0 * inv));
        }
    }
    CsrMatrix::from_triplets(grid.len(), grid.len(), t)
}

/// `div(A D·) + η Δ` as minus the Hessian of the quadrant-averaged energy
/// `½ Σ_k 2^{-dim} Σ_q (D_q w)ᵀ A_k (D_q w)`, where `D_q` are the one-sided
/// gradients into the quadrant `q`. Symmetric, zero row sums, and for diagonal
/// `A` the usual five-point form with arithmetic-mean edge weights.
fn matrix_stencil(grid: PeriodicGrid, problem: &ProblemSpec) -> CsrMatrix {
    let h2 = grid.spacing() * grid.spacing();
    let quadrants: &[[isize; 2]] = &[[1, 1], [1, -1], [-1, 1], [-1, -1]];
    let share = 0.25;
    let mut t = Vec::new();
    for (k, x) in grid.nodes().enumerate() {
        let a = problem.diffusion.matrix_at(x);
        let entry = |i: usize, j: usize| match (i, j) {
            (0, 0) => a[0],
            (1, 1) => a[2],
            _ => a[1],
        };
        for q in quadrants {
            // ℓ_i = (s_i/h)(δ_{k+s_i e_i} − δ_k)
            let nodes = [grid.shift(k, 0, q[0]), grid.shift(k, 1, q[1])];
            for i in 0..2 {
                for j in 0..2 {
                    let c = share * entry(i, j) * (q[i] * q[j]) as f64 / h2;
                    if c == 0.0 {
                        continue;
                    }
                    // −c (δ_{n_i} − δ_k)(δ_{n_j} − δ_k)ᵀ
                    t.push((nodes[i], nodes[j], -c));
                    t.push((nodes[i], k, c));
                    t.push((k, nodes[j], c));
                    t.push((k, k, -c));
                }
            }
        }
    }
    let inv = problem.eta / h2;
    if inv > 0.0 {
        for k in 0..grid.len() {
            for axis in 0..2 {
                t.push((k, grid.shift(k, axis, 1), inv));
                t.push((k, grid.shift(k, axis, -1), inv));
                t.push((k, k, -2.0 * inv));
            }
        }
    }
    CsrMatrix::from_triplets(grid.len(), grid.len(), t)
}

/// Spatial operator plus the implicit solver for a fixed time step.
#[derive(Debug, Clone)]
pub struct Stepper {
    op: SpatialOperator,
    dt: f64,
    tau: f64,
    implicit: CoupledDiffusion,
}

impl Stepper {
    pub fn new(op: SpatialOperator, dt: f64, solver_tolerance: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        if !(solver_tolerance > 0.0) {
            return Err(Error::Config("solver tolerance must be positive".into()));
        }
        let limit = op.cfl_time_step();
        if dt > limit * (1.0 + 1e-12) {
            return Err(Error::Config(format!("time step {dt:.6e} exceeds the monotonicity limit {limit:.6e}")));
        }
        let tau = dt / op.problem.epsilon;
        let m = op.components();
        let coupling: Vec<Vec<f64>> = match &op.problem.coupling {
            Some(c) => (0..m).map(|i| (0..m).map(|j| tau * c.get(i, j)).collect()).collect(),
            None => vec![vec![0.0; m]; m],
        };
        let blocks = (0..m)
            .map(|i| {
                ShiftedDiffusion::new(
                    op.grid,
                    1.0 + coupling[i][i],
                    tau,
                    op.weight.clone(),
                    op.stencil.clone(),
                    solver_tolerance,
                )
            })
            .collect();
        let implicit = CoupledDiffusion::new(blocks, coupling);
        Ok(Self { op, dt, tau, implicit })
    }

    pub fn operator(&self) -> &SpatialOperator {
        &self.op
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `dt/ε`.
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn solve_implicit(&self, b: &[f64]) -> Result<(Vec<f64>, usize)> {
        self.implicit.solve(b)
    }

    pub fn solve_implicit_transpose(&self, g: &[f64]) -> Result<(Vec<f64>, usize)> {
        self.implicit.solve_transpose(g)
    }

    /// Advances one step. `index` labels errors.
    pub fn step(&self, w: &[f64], index: usize) -> Result<StepOutcome> {
        let (f, max_grad) = self.op.numerical_hamiltonian(w);
        if let Some((node, norm, radius)) = self.op.box_violation(w) {
            return Err(Error::Stability {
                step: index,
                reason: format!("gradient norm {norm:.6e} at node {node} left the box of radius {radius}"),
            });
        }
        let mut residual = f;
        self.op.add_linear_terms(w, &mut residual);
        // Increment form M Δ = −τ G(w) of M w⁺ = w − τ F(w): the solver
        // tolerance then scales with the residual rather than with |w|.
        let rhs: Vec<f64> = residual.iter().map(|g| -self.tau * g).collect();
        let (delta, iterations) = self.implicit.solve(&rhs)?;
        let next: Vec<f64> = w.iter().zip(&delta).map(|(a, d)| a + d).collect();
        let before = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let after = next.iter().fold(0.0f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY });
        if !after.is_finite() || after > 2.0 * before.max(1.0) {
            return Err(Error::Stability {
                step: index,
                reason: format!("sup norm jumped from {before:.6e} to {after:.6e}"),
            });
        }
        let max_rate = residual.iter().fold(0.0f64, |m, v| m.max(v.abs())) / self.op.problem.epsilon;
        Ok(StepOutcome { state: next, iterations, max_gradient: max_grad, max_time_derivative: max_rate })
    }
}

/// Result of [`Stepper::step`]; gradient and rate refer to the input state.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: Vec<f64>,
    pub iterations: usize,
    pub max_gradient: f64,
    pub max_time_derivative: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// `None` selects the monotonicity limit of the problem.
    pub dt: Option<f64>,
    pub stored_every: usize,
    pub solver_tolerance: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { dt: None, stored_every: 1, solver_tolerance: DEFAULT_SOLVER_TOLERANCE }
    }
}

impl SolveOptions {
    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = Some(dt);
        self
    }

    pub fn with_stride(mut self, stored_every: usize) -> Self {
        self.stored_every = stored_every;
        self
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.solver_tolerance = tol;
        self
    }
}

/// Stored states of a forward solve.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub problem: ProblemSpec,
    pub grid: PeriodicGrid,
    pub dt: f64,
    pub times: Vec<f64>,
    /// Stacked component states, one per stored time.
    pub states: Vec<Vec<f64>>,
    pub stored_every: usize,
    pub solver_tolerance: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn components(&self) -> usize {
        self.problem.components()
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory holds the initial state")
    }

    pub fn field(&self, index: usize, component: usize) -> ScalarField {
        let n = self.grid.len();
        ScalarField::from_raw(self.grid, self.states[index][component * n..(component + 1) * n].to_vec())
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectory holds the initial state")
    }

    /// Rebuilds the stepper that produced this trajectory.
    pub fn stepper(&self) -> Result<Stepper> {
        Stepper::new(SpatialOperator::new(&self.problem, self.grid)?, self.dt, self.solver_tolerance)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SolveReport {
    pub steps: usize,
    pub max_gradient_norm: f64,
    pub max_time_derivative: f64,
    pub linear_iterations: usize,
    pub max_linear_iterations: usize,
    pub wall_time: f64,
}

/// Solves the scalar equation from `u0` up to time `t_final`.
pub fn solve_cauchy(
    problem: &ProblemSpec,
    u0: &ScalarField,
    t_final: f64,
    options: SolveOptions,
) -> Result<(Trajectory, SolveReport)> {
    if problem.coupling.is_some() || problem.components() != 1 {
        return Err(Error::Config("coupled problems go through solve_system_cauchy".into()));
    }
    run(problem, u0.grid(), u0.values().to_vec(), t_final, options)
}

/// Solves a weakly coupled system from the component data `u0`.
pub fn solve_system_cauchy(
    problem: &ProblemSpec,
    u0: &[ScalarField],
    t_final: f64,
    options: SolveOptions,
) -> Result<(Trajectory, SolveReport)> {
    if problem.coupling.is_none() {
        return Err(Error::Config("system solve requires a coupling matrix".into()));
    }
    if u0.len() != problem.components() {
        return Err(Error::Mismatch(format!("{} initial fields for {} equations", u0.len(), problem.components())));
    }
    let grid = u0[0].grid();
    if u0.iter().any(|f| f.grid() != grid) {
        return Err(Error::Mismatch("initial fields live on different grids".into()));
    }
    let state = u0.iter().flat_map(|f| f.values().iter().copied()).collect();
    run(problem, grid, state, t_final, options)
}

/// Number of steps and the step size that lands exactly on `t_final`.
pub fn step_plan(t_final: f64, dt_max: f64) -> (usize, f64) {
    let steps = ((t_final / dt_max) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    (steps, t_final / steps as f64)
}

fn run(
    problem: &ProblemSpec,
    grid: PeriodicGrid,
    initial: Vec<f64>,
    t_final: f64,
    options: SolveOptions,
) -> Result<(Trajectory, SolveReport)> {
    if !(t_final > 0.0 && t_final.is_finite()) {
        return Err(Error::Config(format!("final time must be positive, got {t_final}")));
    }
    if options.stored_every == 0 {
        return Err(Error::Config("stored_every must be at least 1".into()));
    }
    if let Some(k) = initial.iter().position(|v| !v.is_finite()) {
        return Err(Error::Config(format!("initial data not finite at entry {k}")));
    }
    let start = Instant::now();
    let op = SpatialOperator::new(problem, grid)?;
    let (steps, dt) = step_plan(t_final, options.dt.unwrap_or_else(|| op.cfl_time_step()));
    let stepper = Stepper::new(op, dt, options.solver_tolerance)?;

    let mut times = vec![0.0];
    let mut states = vec![initial.clone()];
    let mut report = SolveReport {
        steps,
        max_gradient_norm: 0.0,
        max_time_derivative: 0.0,
        linear_iterations: 0,
        max_linear_iterations: 0,
        wall_time: 0.0,
    };
    let mut w = initial;
    for n in 0..steps {
        let out = stepper.step(&w, n)?;
        report.max_gradient_norm = report.max_gradient_norm.max(out.max_gradient);
        report.max_time_derivative = report.max_time_derivative.max(out.max_time_derivative);
        report.linear_iterations += out.iterations;
        report.max_linear_iterations = report.max_linear_iterations.max(out.iterations);
        w = out.state;
        if (n + 1) % options.stored_every == 0 || n + 1 == steps {
            times.push((n + 1) as f64 * dt);
            states.push(w.clone());
        }
    }
    let final_grad = stepper.operator().max_gradient(&w);
    if final_grad > problem.gradient_bound * (1.0 + BOX_SLACK) {
        return Err(Error::Stability {
            step: steps,
            reason: format!("gradient norm {final_grad:.6e} left the box of radius {}", problem.gradient_bound),
        });
    }
    report.max_gradient_norm = report.max_gradient_norm.max(final_grad);
    let rate = stepper.operator().residual(&w).iter().fold(0.0f64, |m, v| m.max(v.abs())) / problem.epsilon;
    report.max_time_derivative = report.max_time_derivative.max(rate);
    report.wall_time = start.elapsed().as_secs_f64();
    let trajectory = Trajectory {
        problem: problem.clone(),
        grid,
        dt,
        times,
        states,
        stored_every: options.stored_every,
        solver_tolerance: options.solver_tolerance,
    };
    Ok((trajectory, report))
}

/// `w_t` from the discrete residual: `−G(w)/ε`.
pub fn time_derivative(problem: &ProblemSpec, w: &ScalarField) -> Result<ScalarField> {
    if problem.components() != 1 {
        return Err(Error::Config("coupled problems go through system_time_derivative".into()));
    }
    let op = SpatialOperator::new(problem, w.grid())?;
    let g = op.residual(w.values());
    Ok(ScalarField::from_raw(w.grid(), g.iter().map(|v| -v / problem.epsilon).collect()))
}

/// Componentwise `w_t` for a coupled system.
pub fn system_time_derivative(problem: &ProblemSpec, w: &[ScalarField]) -> Result<Vec<ScalarField>> {
    if w.len() != problem.components() {
        return Err(Error::Mismatch(format!("{} fields for {} equations", w.len(), problem.components())));
    }
    let grid = w[0].grid();
    let op = SpatialOperator::new(problem, grid)?;
    let state: Vec<f64> = w.iter().flat_map(|f| f.values().iter().copied()).collect();
    let g = op.residual(&state);
    let n = grid.len();
    Ok((0..w.len())
        .map(|c| ScalarField::from_raw(grid, g[c * n..(c + 1) * n].iter().map(|v| -v / problem.epsilon).collect()))
        .collect())
}

/// Grid mass of one component of a stacked state.
pub fn component_mass(grid: PeriodicGrid, state: &[f64], component: usize) -> f64 {
    let n = grid.len();
    integrate_values(grid, &state[component * n..(component + 1) * n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{CouplingMatrix, DiffusionSpec, TrigPoly};
    use proptest::prelude::*;

    fn cos_problem(diffusion: DiffusionSpec, epsilon: f64) -> ProblemSpec {
        ProblemSpec::scalar(HamiltonianSpec::quadratic(TrigPoly::cos(0.5, [1, 0])), diffusion, epsilon)
            .with_gradient_bound(3.0)
    }

    fn initial(grid: PeriodicGrid) -> ScalarField {
        ScalarField::from_fn(grid, |x| 0.2 * (2.0 * std::f64::consts::PI * x[0]).sin() + 0.1 * x[1])
    }

    #[test]
    fn matrix_stencil_is_symmetric_with_zero_row_sums() {
        let grid = PeriodicGrid::new(2, 8).unwrap();
        let p = cos_problem(DiffusionSpec::SigmaSigmaT { amplitude: 1.0 }, 0.5);
        let k = matrix_stencil(grid, &p);
        for r in 0..grid.len() {
            for (c, v) in k.row(r) {
                assert!((v - k.get(c, r)).abs() < 1e-9 * v.abs().max(1.0));
            }
        }
        assert!(k.row_sums().iter().all(|s| s.abs() < 1e-9));
        // diagonal A: only axis-0 neighbors with arithmetic-mean weights
        let h2 = grid.spacing().powi(2);
        let a = |k: usize| p.diffusion.matrix_at(grid.coords(k))[0];
        let k0 = 9;
        let east = grid.shift(k0, 0, 1);
        assert!((k.get(k0, east) - (0.5 * (a(k0) + a(east)) + p.eta) / h2).abs() < 1e-9);
        let north = grid.shift(k0, 1, 1);
        assert!((k.get(k0, north) - p.eta / h2).abs() < 1e-9);
    }

    #[test]
    fn transport_transpose_pairs() {
        let grid = PeriodicGrid::new(2, 6).unwrap();
        let op = SpatialOperator::new(&cos_problem(DiffusionSpec::Constant { value: 0.1 }, 0.5), grid).unwrap();
        let w = initial(grid).into_values();
        let slopes = op.tangent_slopes(&w);
        let f: Vec<f64> = (0..grid.len()).map(|k| ((k * 13 % 7) as f64) - 3.0).collect();
        let g: Vec<f64> = (0..grid.len()).map(|k| ((k * 5 % 11) as f64) * 0.3).collect();
        let lhs: f64 = op.apply_transport(&slopes, &f).iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = op.apply_transport_transpose(&slopes, &g).iter().zip(&f).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
        let ones = vec![1.0; grid.len()];
        assert!(op.apply_transport(&slopes, &ones).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn cfl_limit_is_enforced() {
        let grid = PeriodicGrid::new(1, 32).unwrap();
        let p = cos_problem(DiffusionSpec::Zero, 1.0);
        let op = SpatialOperator::new(&p, grid).unwrap();
        assert_eq!(op.cfl_time_step(), 0.5 / 32.0 / 3.0);
        assert!(Stepper::new(op.clone(), 2.0 * op.cfl_time_step(), 1e-12).is_err());
        let u0 = initial(grid);
        assert!(solve_cauchy(&p, &u0, 0.1, SolveOptions::default().with_dt(1.0)).is_err());
    }

    #[test]
    fn gradient_box_violation_is_reported() {
        let grid = PeriodicGrid::new(1, 32).unwrap();
        let p = cos_problem(DiffusionSpec::Zero, 1.0).with_gradient_bound(0.5);
        let u0 = ScalarField::from_fn(grid, |x| (2.0 * std::f64::consts::PI * x[0]).sin());
        let err = solve_cauchy(&p, &u0, 0.1, SolveOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Stability { step: 0, .. }));
    }

    #[test]
    fn replay_is_bit_exact() {
        let grid = PeriodicGrid::new(1, 32).unwrap();
        let p = cos_problem(DiffusionSpec::SinSquared { amplitude: 0.2 }, 0.5);
        let (traj, _) = solve_cauchy(&p, &initial(grid), 0.2, SolveOptions::default()).unwrap();
        let stepper = traj.stepper().unwrap();
        for n in 0..traj.len() - 1 {
            let next = stepper.step(&traj.states[n], n).unwrap().state;
            assert_eq!(next, traj.states[n + 1]);
        }
    }

    #[test]
    fn rescaling_identity() {
        let grid = PeriodicGrid::new(1, 64).unwrap();
        let eps = 0.125;
        let slow = cos_problem(DiffusionSpec::SinSquared { amplitude: 0.3 }, eps);
        let fast = slow.clone().with_epsilon(1.0);
        let dt_fast = fast.gradient_bound.recip() * 0.5 / 64.0 * 0.5;
        let u0 = initial(grid);
        let (a, _) = solve_cauchy(&fast, &u0, 1.0 / eps, SolveOptions::default().with_dt(dt_fast)).unwrap();
        let (b, _) = solve_cauchy(&slow, &u0, 1.0, SolveOptions::default().with_dt(dt_fast * eps)).unwrap();
        assert_eq!(a.len(), b.len());
        assert_eq!(a.last(), b.last());
    }

    #[test]
    fn symmetric_system_matches_scalar() {
        let grid = PeriodicGrid::new(1, 32).unwrap();
        let scalar = cos_problem(DiffusionSpec::SinSquared { amplitude: 0.2 }, 0.5);
        let coupling = CouplingMatrix::new(vec![vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let h = scalar.hamiltonians[0].clone();
        let system =
            ProblemSpec::system(vec![h.clone(), h], scalar.diffusion.clone(), coupling, 0.5).with_gradient_bound(3.0);
        let u0 = initial(grid);
        let (s, _) = solve_cauchy(&scalar, &u0, 0.2, SolveOptions::default()).unwrap();
        let (sys, _) = solve_system_cauchy(&system, &[u0.clone(), u0], 0.2, SolveOptions::default()).unwrap();
        let n = grid.len();
        for (a, b) in s.states.iter().zip(&sys.states) {
            assert_eq!(&b[..n], &b[n..]);
            for (x, y) in a.iter().zip(&b[..n]) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn constant_data_follow_the_coupling_ode() {
        // ε k' = −C k; each implicit step applies (I + τC)⁻¹, second-order
        // close to exp(−τC) per step.
        let grid = PeriodicGrid::new(1, 16).unwrap();
        let c = vec![vec![1.0, -1.0], vec![-2.0, 2.0]];
        let coupling = CouplingMatrix::new(c.clone()).unwrap();
        let h = HamiltonianSpec::quadratic(TrigPoly::zero());
        let p = ProblemSpec::system(vec![h.clone(), h], DiffusionSpec::Zero, coupling, 0.5).with_gradient_bound(1.0);
        let u0 = [ScalarField::constant(grid, 1.0), ScalarField::constant(grid, -0.5)];
        let dt = 1.0 / 64.0 * 0.25 * 0.5;
        let (traj, _) = solve_system_cauchy(&p, &u0, 10.0 * dt, SolveOptions::default().with_dt(dt)).unwrap();
        let tau = dt / 0.5;
        // C has eigenvalues 0 and 3: k(t) = P0 k0 + e^{−3t/ε} P3 k0.
        let k0 = [1.0, -0.5];
        let mean = (2.0 * k0[0] + k0[1]) / 3.0;
        let d = [k0[0] - mean, k0[1] - mean];
        for n in 1..traj.len() - 1 {
            let exact: Vec<f64> = d.iter().map(|di| mean + di * (-3.0 * tau * (n + 1) as f64).exp()).collect();
            let start: Vec<f64> = d.iter().map(|di| mean + di * (-3.0 * tau * n as f64).exp()).collect();
            // one implicit step from the exact state
            let one = [start[0] * 1.0, start[1]];
            let m = [[1.0 + tau * c[0][0], tau * c[0][1]], [tau * c[1][0], 1.0 + tau * c[1][1]]];
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            let step = [(m[1][1] * one[0] - m[0][1] * one[1]) / det, (m[0][0] * one[1] - m[1][0] * one[0]) / det];
            for i in 0..2 {
                assert!((step[i] - exact[i]).abs() <= 9.0 * tau * tau);
            }
            let state = &traj.states[n];
            let (a, b) = (state[0], state[16]);
            assert!(state[..16].iter().all(|v| *v == a) && state[16..].iter().all(|v| *v == b));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn comparison_and_shift(amp in 0.0f64..0.3, k in -1.0f64..1.0, bump in 0.0f64..0.2) {
            let grid = PeriodicGrid::new(1, 32).unwrap();
            let p = cos_problem(DiffusionSpec::SinSquared { amplitude: amp }, 0.5);
            let u0 = initial(grid);
            let hi = ScalarField::new(
                grid,
                grid.nodes().zip(u0.values()).map(|(x, v)| v + bump * (1.0 + (2.0 * std::f64::consts::PI * x[0]).sin())).collect(),
            )
            .unwrap();
            let (a, _) = solve_cauchy(&p, &u0, 0.1, SolveOptions::default()).unwrap();
            let (b, _) = solve_cauchy(&p, &hi, 0.1, SolveOptions::default()).unwrap();
            let shifted = u0.map(|v| v + k);
            let (c, _) = solve_cauchy(&p, &shifted, 0.1, SolveOptions::default()).unwrap();
            let mut last = f64::INFINITY;
            for n in 0..a.len() {
                let dist = a.states[n].iter().zip(&b.states[n]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                prop_assert!(dist <= last + 1e-13);
                last = dist;
                for (x, y) in a.states[n].iter().zip(&b.states[n]) {
                    prop_assert!(*x <= y + 1e-13);
                }
                for (x, y) in a.states[n].iter().zip(&c.states[n]) {
                    prop_assert!((x + k - y).abs() < 1e-12);
                }
            }
        }
    }
}
