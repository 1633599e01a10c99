//! Backward propagation of the adjoint density through the exact transpose
//! of the discrete linearization.
//!
//! For each step `w⁺ = M⁻¹(w − τF(w))` the residual `G = F − WK + C` obeys
//! `G(w⁺) = T̄ M⁻¹ G(w)` exactly, with `T̄ = I − τ F̄'` and `F̄'` the Jacobian of
//! `F` averaged along the segment `[w, w⁺]`. The density is carried backward by
//! `σ = M⁻ᵀ T̄ᵀ σ⁺`, which makes `⟨G(w), σ⟩` the same at every step. Both
//! factors preserve mass and, under the monotonicity limit, positivity.

use crate::forward::{Stepper, Trajectory};
use crate::grid::{PeriodicGrid, ScalarField};
use crate::{Error, Result};

/// Mass drift or undershoot beyond this aborts the backward solve.
pub const CONSERVATION_LIMIT: f64 = 1e-8;

/// Linearization of every step of a fully stored trajectory. Steps are
/// assembled on demand.
#[derive(Debug, Clone)]
pub struct Linearization<'a> {
    trajectory: &'a Trajectory,
    stepper: Stepper,
}

/// Builds the step linearizations of `trajectory`; every step must be stored.
pub fn linearize(trajectory: &Trajectory) -> Result<Linearization<'_>> {
    if trajectory.stored_every != 1 {
        return Err(Error::Config(format!(
            "linearization needs every step stored, trajectory keeps every {}",
            trajectory.stored_every
        )));
    }
    Ok(Linearization { trajectory, stepper: trajectory.stepper()? })
}

impl<'a> Linearization<'a> {
    pub fn trajectory(&self) -> &'a Trajectory {
        self.trajectory
    }

    pub fn stepper(&self) -> &Stepper {
        &self.stepper
    }

    /// Number of steps.
    pub fn len(&self) -> usize {
        self.trajectory.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step(&self, index: usize) -> LinearizedStep<'_> {
        let before = &self.trajectory.states[index];
        let after = &self.trajectory.states[index + 1];
        let op = self.stepper.operator();
        LinearizedStep {
            index,
            stepper: &self.stepper,
            secant: op.secant_slopes(before, after),
            tangent: op.tangent_slopes(before),
        }
    }

    pub fn steps(&self) -> impl DoubleEndedIterator<Item = LinearizedStep<'_>> + '_ {
        (0..self.len()).map(move |n| self.step(n))
    }
}

/// One linearized step. `apply` is the residual propagator `T̄ M⁻¹`;
/// `jacobian_apply` is the derivative `M⁻¹ T` of the update map at the stored
/// state, the two being similar up to the averaging of the slopes.
#[derive(Debug, Clone)]
pub struct LinearizedStep<'a> {
    pub index: usize,
    stepper: &'a Stepper,
    secant: Vec<[f64; 2]>,
    tangent: Vec<[f64; 2]>,
}

impl LinearizedStep<'_> {
    fn explicit(&self, slopes: &[[f64; 2]], f: &[f64]) -> Vec<f64> {
        let tau = self.stepper.tau();
        let t = self.stepper.operator().apply_transport(slopes, f);
        f.iter().zip(&t).map(|(a, b)| a - tau * b).collect()
    }

    fn explicit_transpose(&self, slopes: &[[f64; 2]], g: &[f64]) -> Vec<f64> {
        let tau = self.stepper.tau();
        let t = self.stepper.operator().apply_transport_transpose(slopes, g);
        g.iter().zip(&t).map(|(a, b)| a - tau * b).collect()
    }

    /// `T̄ M⁻¹ f`.
    pub fn apply(&self, f: &[f64]) -> Result<Vec<f64>> {
        let (z, _) = self.stepper.solve_implicit(f)?;
        Ok(self.explicit(&self.secant, &z))
    }

    /// `M⁻ᵀ T̄ᵀ g`.
    pub fn apply_transpose(&self, g: &[f64]) -> Result<Vec<f64>> {
        let y = self.explicit_transpose(&self.secant, g);
        Ok(self.stepper.solve_implicit_transpose(&y)?.0)
    }

    /// `M⁻¹ T f`, the derivative of the update map at the stored state.
    pub fn jacobian_apply(&self, f: &[f64]) -> Result<Vec<f64>> {
        let t = self.explicit(&self.tangent, f);
        Ok(self.stepper.solve_implicit(&t)?.0)
    }

    /// `Tᵀ M⁻ᵀ g`.
    pub fn jacobian_apply_transpose(&self, g: &[f64]) -> Result<Vec<f64>> {
        let (z, _) = self.stepper.solve_implicit_transpose(g)?;
        Ok(self.explicit_transpose(&self.tangent, &z))
    }
}

/// Backward density trajectory, aligned with the forward stored times.
#[derive(Debug, Clone)]
pub struct AdjointDensity {
    pub grid: PeriodicGrid,
    pub components: usize,
    pub times: Vec<f64>,
    /// Stacked component densities; `states[n]` sits at `times[n]`.
    pub states: Vec<Vec<f64>>,
    pub source: usize,
    pub component: usize,
}

impl AdjointDensity {
    pub fn field(&self, index: usize, component: usize) -> ScalarField {
        let n = self.grid.len();
        ScalarField::from_raw(self.grid, self.states[index][component * n..(component + 1) * n].to_vec())
    }

    /// Total mass over all components at stored index `index`.
    pub fn mass(&self, index: usize) -> f64 {
        self.grid.cell_volume() * self.states[index].iter().sum::<f64>()
    }

    pub fn max_mass_error(&self) -> f64 {
        (0..self.states.len()).map(|n| (self.mass(n) - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.states.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Adjoint density of a scalar problem with a Dirac at node `source` at the
/// final time.
pub fn solve_adjoint(linearization: &Linearization<'_>, source: usize) -> Result<AdjointDensity> {
    if linearization.trajectory.components() != 1 {
        return Err(Error::Config("coupled problems go through solve_system_adjoint".into()));
    }
    backward(linearization, source, 0)
}

/// Adjoint density of a system with the Dirac in component `component`
/// (0-based).
pub fn solve_system_adjoint(
    linearization: &Linearization<'_>,
    source: usize,
    component: usize,
) -> Result<AdjointDensity> {
    if component >= linearization.trajectory.components() {
        return Err(Error::Config(format!(
            "component {component} out of range for {} equations",
            linearization.trajectory.components()
        )));
    }
    backward(linearization, source, component)
}

fn backward(linearization: &Linearization<'_>, source: usize, component: usize) -> Result<AdjointDensity> {
    let traj = linearization.trajectory;
    let grid = traj.grid;
    if source >= grid.len() {
        return Err(Error::Config(format!("source node {source} outside the grid")));
    }
    let m = traj.components();
    let n = grid.len();
    let mut terminal = vec![0.0; m * n];
    terminal[component * n + source] = 1.0 / grid.cell_volume();
    let steps = linearization.len();
    let mut states = vec![Vec::new(); steps + 1];
    states[steps] = terminal;
    for index in (0..steps).rev() {
        let next = linearization.step(index).apply_transpose(&states[index + 1])?;
        let mass = grid.cell_volume() * next.iter().sum::<f64>();
        if (mass - 1.0).abs() > CONSERVATION_LIMIT {
            return Err(Error::Conservation { step: index, reason: format!("mass {mass:.15e}") });
        }
        let low = next.iter().copied().fold(f64::INFINITY, f64::min);
        if low < -CONSERVATION_LIMIT {
            return Err(Error::Conservation { step: index, reason: format!("density undershoot {low:.3e}") });
        }
        states[index] = next;
    }
    Ok(AdjointDensity { grid, components: m, times: traj.times.clone(), states, source, component })
}

/// Node of largest absolute value.
pub fn argmax_abs(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (k, v)| if v.abs() > best.1 { (k, v.abs()) } else { best })
        .0
}
