//! Hamiltonian and diffusion catalogs, hypothesis validation, coupling
//! matrices, and manufactured ergodic problems.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ergodic::ErgodicSolution;
use crate::grid::{min_eigenvalue, PeriodicGrid, ScalarField};
use crate::{Error, Result};

const TWO_PI: f64 = 2.0 * PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wave {
    Cos,
    Sin,
}

/// `amplitude · cos(2π k·x)` or `amplitude · sin(2π k·x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub amplitude: f64,
    pub k: [i32; 2],
    pub wave: Wave,
}

/// Finite trigonometric sum on the torus with closed-form derivatives.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrigPoly {
    pub terms: Vec<TrigTerm>,
}

/// Value and derivatives up to third order of a smooth function at a point.
/// Matrices use `[f_11, f_12, f_22]`; `third[j]` holds `∂_j` of that triple.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Jet {
    pub value: f64,
    pub gradient: [f64; 2],
    pub hessian: [f64; 3],
    pub third: [[f64; 3]; 2],
}

impl Jet {
    pub fn laplacian(&self) -> f64 {
        self.hessian[0] + self.hessian[2]
    }
}

impl TrigPoly {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn term(amplitude: f64, k: [i32; 2], wave: Wave) -> Self {
        Self { terms: vec![TrigTerm { amplitude, k, wave }] }
    }

    pub fn cos(amplitude: f64, k: [i32; 2]) -> Self {
        Self::term(amplitude, k, Wave::Cos)
    }

    pub fn sin(amplitude: f64, k: [i32; 2]) -> Self {
        Self::term(amplitude, k, Wave::Sin)
    }

    pub fn plus(mut self, other: Self) -> Self {
        self.terms.extend(other.terms);
        self
    }

    pub fn value(&self, x: [f64; 2]) -> f64 {
        self.jet(x).value
    }

    pub fn jet(&self, x: [f64; 2]) -> Jet {
        let mut jet = Jet::default();
        for t in &self.terms {
            let w = [TWO_PI * t.k[0] as f64, TWO_PI * t.k[1] as f64];
            let theta = w[0] * x[0] + w[1] * x[1];
            let (s, c) = theta.sin_cos();
            // d^n/dθ^n of the term is amplitude · cos(θ + (n + shift)π/2).
            let shift = match t.wave {
                Wave::Cos => 0,
                Wave::Sin => 3,
            };
            let wave = |n: usize| {
                t.amplitude
                    * match (n + shift) % 4 {
                        0 => c,
                        1 => -s,
                        2 => -c,
                        _ => s,
                    }
            };
            jet.value += wave(0);
            let d1 = wave(1);
            let d2 = wave(2);
            let d3 = wave(3);
            for j in 0..2 {
                jet.gradient[j] += d1 * w[j];
                jet.third[j][0] += d3 * w[j] * w[0] * w[0];
                jet.third[j][1] += d3 * w[j] * w[0] * w[1];
                jet.third[j][2] += d3 * w[j] * w[1] * w[1];
            }
            jet.hessian[0] += d2 * w[0] * w[0];
            jet.hessian[1] += d2 * w[0] * w[1];
            jet.hessian[2] += d2 * w[1] * w[1];
        }
        jet
    }

    /// Upper bound for the sup norm of the `order`-th derivative tensor.
    pub fn derivative_bound(&self, order: i32) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let freq = TWO_PI * ((t.k[0] * t.k[0] + t.k[1] * t.k[1]) as f64).sqrt();
                t.amplitude.abs() * freq.powi(order)
            })
            .sum()
    }

    pub fn sample(&self, grid: PeriodicGrid) -> ScalarField {
        ScalarField::from_fn(grid, |x| self.value(x))
    }
}

/// Initial-data and corrector profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    Trig {
        poly: TrigPoly,
    },
    /// Periodic linear interpolation in `x_1` through `(x, value)` knots with
    /// `x` in `[0, 1)`, increasing.
    PiecewiseLinear {
        knots: Vec<[f64; 2]>,
    },
}

impl Profile {
    pub fn trig(poly: TrigPoly) -> Self {
        Profile::Trig { poly }
    }

    pub fn value(&self, x: [f64; 2]) -> f64 {
        match self {
            Profile::Trig { poly } => poly.value(x),
            Profile::PiecewiseLinear { knots } => {
                let n = knots.len();
                let t = x[0].rem_euclid(1.0);
                let upper = knots.iter().position(|k| k[0] > t).unwrap_or(n);
                let (lo, hi) = match upper {
                    0 => (knots[n - 1], [knots[0][0] + 1.0, knots[0][1]]),
                    u if u == n => (knots[n - 1], [knots[0][0] + 1.0, knots[0][1]]),
                    u => (knots[u - 1], knots[u]),
                };
                let t = if t < lo[0] { t + 1.0 } else { t };
                lo[1] + (hi[1] - lo[1]) * (t - lo[0]) / (hi[0] - lo[0])
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Profile::PiecewiseLinear { knots } = self {
            if knots.len() < 2 {
                return Err(Error::Config("piecewise-linear profile needs at least 2 knots".into()));
            }
            let ordered = knots.windows(2).all(|w| w[0][0] < w[1][0]);
            let in_range = knots.iter().all(|k| (0.0..1.0).contains(&k[0]) && k[1].is_finite());
            if !ordered || !in_range {
                return Err(Error::Config(
                    "piecewise-linear knots must be increasing in [0, 1) with finite values".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn sample(&self, grid: PeriodicGrid) -> ScalarField {
        ScalarField::from_fn(grid, |x| self.value(x))
    }

    /// Closed-form derivatives, when available.
    pub fn jet(&self, x: [f64; 2]) -> Option<Jet> {
        match self {
            Profile::Trig { poly } => Some(poly.jet(x)),
            Profile::PiecewiseLinear { .. } => None,
        }
    }

    /// Upper bound for the Lipschitz constant.
    pub fn lipschitz_bound(&self) -> f64 {
        match self {
            Profile::Trig { poly } => poly.derivative_bound(1),
            Profile::PiecewiseLinear { knots } => {
                let n = knots.len();
                (0..n)
                    .map(|i| {
                        let a = knots[i];
                        let b = if i + 1 < n { knots[i + 1] } else { [knots[0][0] + 1.0, knots[0][1]] };
                        ((b[1] - a[1]) / (b[0] - a[0])).abs()
                    })
                    .fold(0.0, f64::max)
            }
        }
    }
}

/// Diffusion catalog. Scalar families act as `a(x) I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DiffusionSpec {
    Zero,
    Constant {
        value: f64,
    },
    /// `amplitude · sin²(π x_1)`.
    SinSquared {
        amplitude: f64,
    },
    /// `amplitude · |sin(2π x_1)|`; not C², kept as a validator counterexample.
    AbsSine {
        amplitude: f64,
    },
    /// `A = σσᵀ` with `σ = √amplitude · (sin(π x_1), 0)ᵀ`; two dimensions only.
    SigmaSigmaT {
        amplitude: f64,
    },
}

impl DiffusionSpec {
    pub fn is_matrix(&self) -> bool {
        matches!(self, DiffusionSpec::SigmaSigmaT { .. })
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let amplitude = match *self {
            DiffusionSpec::Zero => 0.0,
            DiffusionSpec::Constant { value } => value,
            DiffusionSpec::SinSquared { amplitude }
            | DiffusionSpec::AbsSine { amplitude }
            | DiffusionSpec::SigmaSigmaT { amplitude } => amplitude,
        };
        if !(amplitude >= 0.0 && amplitude.is_finite()) {
            return Err(Error::Config(format!("diffusion amplitude must be finite and ≥ 0, got {amplitude}")));
        }
        if self.is_matrix() && dim != 2 {
            return Err(Error::Config("matrix diffusion requires a two-dimensional grid".into()));
        }
        Ok(())
    }

    /// Scalar coefficient `a(x)` with gradient and Hessian; `None` for matrix
    /// families.
    pub fn scalar_jet(&self, x: [f64; 2]) -> Option<Jet> {
        let s1 = (PI * x[0]).sin();
        let mut jet = Jet::default();
        match *self {
            DiffusionSpec::Zero => {}
            DiffusionSpec::Constant { value } => jet.value = value,
            DiffusionSpec::SinSquared { amplitude } => {
                jet.value = amplitude * s1 * s1;
                jet.gradient[0] = amplitude * PI * (TWO_PI * x[0]).sin();
                jet.hessian[0] = amplitude * TWO_PI * PI * (TWO_PI * x[0]).cos();
                jet.third[0][0] = -amplitude * TWO_PI * TWO_PI * PI * (TWO_PI * x[0]).sin();
            }
            DiffusionSpec::AbsSine { amplitude } => {
                let s = (TWO_PI * x[0]).sin();
                let c = (TWO_PI * x[0]).cos();
                let sign = if s < 0.0 { -1.0 } else { 1.0 };
                jet.value = amplitude * s.abs();
                jet.gradient[0] = amplitude * sign * TWO_PI * c;
                jet.hessian[0] = -amplitude * TWO_PI * TWO_PI * s.abs();
                jet.third[0][0] = -amplitude * sign * TWO_PI.powi(3) * c;
            }
            DiffusionSpec::SigmaSigmaT { .. } => return None,
        }
        Some(jet)
    }

    /// `A(x)` as `[a11, a12, a22]`.
    pub fn matrix_at(&self, x: [f64; 2]) -> [f64; 3] {
        match *self {
            DiffusionSpec::SigmaSigmaT { amplitude } => [amplitude * (PI * x[0]).sin().powi(2), 0.0, 0.0],
            _ => {
                let a = self.scalar_jet(x).map_or(0.0, |j| j.value);
                [a, 0.0, a]
            }
        }
    }

    /// `∂_j A(x)` for `j = 0, 1`.
    pub fn matrix_gradient(&self, x: [f64; 2]) -> [[f64; 3]; 2] {
        match *self {
            DiffusionSpec::SigmaSigmaT { amplitude } => [[amplitude * PI * (TWO_PI * x[0]).sin(), 0.0, 0.0], [0.0; 3]],
            _ => {
                let g = self.scalar_jet(x).map_or([0.0; 2], |j| j.gradient);
                [[g[0], 0.0, g[0]], [g[1], 0.0, g[1]]]
            }
        }
    }

    /// Row divergence `(div A)_j = Σ_i ∂_i a_ij`.
    pub fn divergence(&self, x: [f64; 2]) -> [f64; 2] {
        let d = self.matrix_gradient(x);
        [d[0][0] + d[1][1], d[0][1] + d[1][2]]
    }

    /// `∂_j tr(A D²v)` evaluated from closed forms.
    fn contraction_jet(&self, x: [f64; 2], v: &Jet) -> (f64, [f64; 2]) {
        let a = self.matrix_at(x);
        let da = self.matrix_gradient(x);
        let contract = |m: &[f64; 3], s: &[f64; 3]| m[0] * s[0] + 2.0 * m[1] * s[1] + m[2] * s[2];
        let value = contract(&a, &v.hessian);
        let grad = [
            contract(&da[0], &v.hessian) + contract(&a, &v.third[0]),
            contract(&da[1], &v.hessian) + contract(&a, &v.third[1]),
        ];
        (value, grad)
    }

    /// Upper bound for `‖D²A‖∞` (entrywise); for scalar families, `‖D²a‖∞`.
    pub fn second_derivative_bound(&self) -> f64 {
        match *self {
            DiffusionSpec::Zero | DiffusionSpec::Constant { .. } => 0.0,
            DiffusionSpec::SinSquared { amplitude } | DiffusionSpec::SigmaSigmaT { amplitude } => {
                2.0 * PI * PI * amplitude
            }
            DiffusionSpec::AbsSine { amplitude } => TWO_PI * TWO_PI * amplitude,
        }
    }

    pub fn sup_bound(&self) -> f64 {
        match *self {
            DiffusionSpec::Zero => 0.0,
            DiffusionSpec::Constant { value } => value,
            DiffusionSpec::SinSquared { amplitude }
            | DiffusionSpec::AbsSine { amplitude }
            | DiffusionSpec::SigmaSigmaT { amplitude } => amplitude,
        }
    }

    pub fn first_derivative_bound(&self) -> f64 {
        match *self {
            DiffusionSpec::Zero | DiffusionSpec::Constant { .. } => 0.0,
            DiffusionSpec::SinSquared { amplitude } | DiffusionSpec::SigmaSigmaT { amplitude } => PI * amplitude,
            DiffusionSpec::AbsSine { amplitude } => TWO_PI * amplitude,
        }
    }
}

/// Hamiltonian catalog. Every family carries an additive `shift`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum HamiltonianSpec {
    /// `½|p|² + V(x) + shift`.
    Quadratic {
        #[serde(default)]
        potential: TrigPoly,
        #[serde(default)]
        shift: f64,
    },
    /// `½|p − b(x)|² + V(x) + shift`.
    Drifted {
        drift: [TrigPoly; 2],
        #[serde(default)]
        potential: TrigPoly,
        #[serde(default)]
        shift: f64,
    },
    /// `½|p|² + f(x) + shift` with `f = tr(A D²v) − ½|Dv|²`, so that `v`
    /// solves the cell problem with constant `shift`.
    ///
    /// With `discrete_correction` the solver adds the nodal potential that
    /// makes the sampled corrector an exact steady state of the inviscid
    /// discrete scheme.
    Manufactured {
        corrector: TrigPoly,
        diffusion: DiffusionSpec,
        #[serde(default)]
        shift: f64,
        #[serde(default)]
        discrete_correction: bool,
    },
    /// `¼|p|⁴ + shift`; degenerate at `p = 0`.
    Quartic {
        #[serde(default)]
        shift: f64,
    },
}

impl HamiltonianSpec {
    pub fn quadratic(potential: TrigPoly) -> Self {
        HamiltonianSpec::Quadratic { potential, shift: 0.0 }
    }

    pub fn shift(&self) -> f64 {
        match *self {
            HamiltonianSpec::Quadratic { shift, .. }
            | HamiltonianSpec::Drifted { shift, .. }
            | HamiltonianSpec::Manufactured { shift, .. }
            | HamiltonianSpec::Quartic { shift } => shift,
        }
    }

    pub fn with_shift(&self, value: f64) -> Self {
        let mut out = self.clone();
        match &mut out {
            HamiltonianSpec::Quadratic { shift, .. }
            | HamiltonianSpec::Drifted { shift, .. }
            | HamiltonianSpec::Manufactured { shift, .. }
            | HamiltonianSpec::Quartic { shift } => *shift = value,
        }
        out
    }

    pub fn with_discrete_correction(&self) -> Self {
        let mut out = self.clone();
        if let HamiltonianSpec::Manufactured { discrete_correction, .. } = &mut out {
            *discrete_correction = true;
        }
        out
    }

    /// Declared convexity constant: `D²_pp H ⪰ 2θ I`.
    pub fn theta(&self) -> f64 {
        match self {
            HamiltonianSpec::Quartic { .. } => 0.0,
            _ => 0.5,
        }
    }

    /// Declared growth constant: `|D_x H| ≤ C (1 + |p|²)`.
    pub fn growth_constant(&self) -> f64 {
        match self {
            HamiltonianSpec::Quadratic { potential, .. } => potential.derivative_bound(1),
            HamiltonianSpec::Drifted { drift, potential, .. } => {
                let db = drift[0].derivative_bound(1) + drift[1].derivative_bound(1);
                let b = drift[0].derivative_bound(0) + drift[1].derivative_bound(0);
                db * (1.0 + b) + potential.derivative_bound(1)
            }
            HamiltonianSpec::Manufactured { corrector, diffusion, .. } => {
                let v = |k| corrector.derivative_bound(k);
                // |Df| ≤ |DA||D²v| + |A||D³v| + |D²v||Dv|, with entrywise sums.
                4.0 * (diffusion.first_derivative_bound() * v(2) + diffusion.sup_bound() * v(3)) + v(2) * v(1)
            }
            HamiltonianSpec::Quartic { .. } => 0.0,
        }
    }

    /// Closed-form potential `V(x)` (including `f` for the manufactured
    /// family, excluding the shift).
    fn potential_jet(&self, x: [f64; 2]) -> (f64, [f64; 2]) {
        match self {
            HamiltonianSpec::Quadratic { potential, .. } | HamiltonianSpec::Drifted { potential, .. } => {
                let j = potential.jet(x);
                (j.value, j.gradient)
            }
            HamiltonianSpec::Manufactured { corrector, diffusion, .. } => {
                let v = corrector.jet(x);
                let (t, dt) = diffusion.contraction_jet(x, &v);
                let g = v.gradient;
                let h = v.hessian;
                let value = t - 0.5 * (g[0] * g[0] + g[1] * g[1]);
                let grad = [dt[0] - (h[0] * g[0] + h[1] * g[1]), dt[1] - (h[1] * g[0] + h[2] * g[1])];
                (value, grad)
            }
            HamiltonianSpec::Quartic { .. } => (0.0, [0.0; 2]),
        }
    }

    fn drift(&self, x: [f64; 2]) -> ([f64; 2], [[f64; 2]; 2]) {
        match self {
            HamiltonianSpec::Drifted { drift, .. } => {
                let j0 = drift[0].jet(x);
                let j1 = drift[1].jet(x);
                ([j0.value, j1.value], [j0.gradient, j1.gradient])
            }
            _ => ([0.0; 2], [[0.0; 2]; 2]),
        }
    }

    pub fn value(&self, x: [f64; 2], p: [f64; 2]) -> f64 {
        let (v, _) = self.potential_jet(x);
        let shift = self.shift();
        match self {
            HamiltonianSpec::Quartic { .. } => 0.25 * (p[0] * p[0] + p[1] * p[1]).powi(2) + shift,
            _ => {
                let (b, _) = self.drift(x);
                let q = [p[0] - b[0], p[1] - b[1]];
                0.5 * (q[0] * q[0] + q[1] * q[1]) + v + shift
            }
        }
    }

    pub fn gradient_p(&self, x: [f64; 2], p: [f64; 2]) -> [f64; 2] {
        match self {
            HamiltonianSpec::Quartic { .. } => {
                let r2 = p[0] * p[0] + p[1] * p[1];
                [r2 * p[0], r2 * p[1]]
            }
            _ => {
                let (b, _) = self.drift(x);
                [p[0] - b[0], p[1] - b[1]]
            }
        }
    }

    pub fn gradient_x(&self, x: [f64; 2], p: [f64; 2]) -> [f64; 2] {
        let (_, dv) = self.potential_jet(x);
        let (b, db) = self.drift(x);
        let q = [p[0] - b[0], p[1] - b[1]];
        // ∂_j ½|p − b|² = −Σ_i q_i ∂_j b_i
        [dv[0] - q[0] * db[0][0] - q[1] * db[1][0], dv[1] - q[0] * db[0][1] - q[1] * db[1][1]]
    }

    pub fn hessian_pp(&self, p: [f64; 2]) -> [f64; 3] {
        match self {
            HamiltonianSpec::Quartic { .. } => {
                let r2 = p[0] * p[0] + p[1] * p[1];
                [r2 + 2.0 * p[0] * p[0], 2.0 * p[0] * p[1], r2 + 2.0 * p[1] * p[1]]
            }
            _ => [1.0, 0.0, 1.0],
        }
    }

    /// Freezes the Hamiltonian at `x`, adding the first-order drift `d·p`.
    pub fn localize(&self, x: [f64; 2], d: [f64; 2]) -> LocalHamiltonian {
        let (v, _) = self.potential_jet(x);
        let shift = self.shift();
        match self {
            HamiltonianSpec::Quartic { .. } => LocalHamiltonian::Quartic { drift: d, offset: shift },
            _ => {
                // ½|p − b|² + d·p = ½|p − (b − d)|² + b·d − ½|d|²
                let (b, _) = self.drift(x);
                let center = [b[0] - d[0], b[1] - d[1]];
                let offset = v + shift + b[0] * d[0] + b[1] * d[1] - 0.5 * (d[0] * d[0] + d[1] * d[1]);
                LocalHamiltonian::Quadratic { center, offset }
            }
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !self.shift().is_finite() {
            return Err(Error::Config("hamiltonian shift must be finite".into()));
        }
        if let HamiltonianSpec::Manufactured { diffusion, .. } = self {
            diffusion.validate(dim)?;
        }
        Ok(())
    }
}

/// Hamiltonian frozen at one node, as a function of `p` only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LocalHamiltonian {
    /// `½|p − center|² + offset`.
    Quadratic { center: [f64; 2], offset: f64 },
    /// `¼|p|⁴ + drift·p + offset`.
    Quartic { drift: [f64; 2], offset: f64 },
}

impl LocalHamiltonian {
    #[inline]
    pub fn value(&self, p: [f64; 2]) -> f64 {
        match *self {
            LocalHamiltonian::Quadratic { center, offset } => {
                let q = [p[0] - center[0], p[1] - center[1]];
                0.5 * (q[0] * q[0] + q[1] * q[1]) + offset
            }
            LocalHamiltonian::Quartic { drift, offset } => {
                0.25 * (p[0] * p[0] + p[1] * p[1]).powi(2) + drift[0] * p[0] + drift[1] * p[1] + offset
            }
        }
    }

    #[inline]
    pub fn gradient(&self, p: [f64; 2]) -> [f64; 2] {
        match *self {
            LocalHamiltonian::Quadratic { center, .. } => [p[0] - center[0], p[1] - center[1]],
            LocalHamiltonian::Quartic { drift, .. } => {
                let r2 = p[0] * p[0] + p[1] * p[1];
                [r2 * p[0] + drift[0], r2 * p[1] + drift[1]]
            }
        }
    }

    /// `max_{|p| ≤ radius} |∂_{p_i} H|` per axis.
    pub fn slope_bound(&self, radius: f64) -> [f64; 2] {
        match *self {
            LocalHamiltonian::Quadratic { center, .. } => [radius + center[0].abs(), radius + center[1].abs()],
            LocalHamiltonian::Quartic { drift, .. } => {
                let r3 = radius.powi(3);
                [r3 + drift[0].abs(), r3 + drift[1].abs()]
            }
        }
    }

    pub fn add_offset(&mut self, delta: f64) {
        match self {
            LocalHamiltonian::Quadratic { offset, .. } | LocalHamiltonian::Quartic { offset, .. } => *offset += delta,
        }
    }
}

/// Zeroth-order coupling `Σ_j c_ij u_j` between the equations of a system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CouplingMatrix {
    entries: Vec<Vec<f64>>,
}

impl CouplingMatrix {
    /// Checks shape only; sign and row-sum conditions are checked by
    /// [`validate_coupling`].
    pub fn new(entries: Vec<Vec<f64>>) -> Result<Self> {
        let m = entries.len();
        if m < 2 {
            return Err(Error::Config(format!("coupling needs at least 2 equations, got {m}")));
        }
        if entries.iter().any(|row| row.len() != m) {
            return Err(Error::Config("coupling matrix must be square".into()));
        }
        if entries.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("coupling entries must be finite".into()));
        }
        Ok(Self { entries })
    }

    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i][j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.entries
    }

    /// `Σ_j c_ij u_j` for stacked component values at one node.
    pub fn apply_at(&self, i: usize, values: impl Fn(usize) -> f64) -> f64 {
        self.entries[i].iter().enumerate().map(|(j, c)| c * values(j)).sum()
    }
}

/// Result of one hypothesis check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Smallest constant compatible with the samples.
    pub empirical: f64,
    /// Constant the check was held against.
    pub bound: f64,
    pub witness: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct ValidationReport {
    pub checks: Vec<CheckOutcome>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn empirical(&self, name: &str) -> Option<f64> {
        self.check(name).map(|c| c.empirical)
    }

    /// Converts the first failing check into an error.
    pub fn ensure(self) -> Result<Self> {
        match self.checks.iter().find(|c| !c.passed) {
            None => Ok(self),
            Some(c) => Err(Error::HypothesisViolation {
                hypothesis: c.name.clone(),
                witness: c.witness.clone().unwrap_or_else(|| "no witness recorded".into()),
            }),
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let status = if c.passed { "pass" } else { "FAIL" };
            write!(f, "{status} {}: empirical {:.6e}, bound {:.6e}", c.name, c.empirical, c.bound)?;
            if let Some(w) = &c.witness {
                write!(f, " ({w})")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub const CHECK_CONVEXITY: &str = "H1 convexity";
pub const CHECK_GROWTH: &str = "H2 growth";
pub const CHECK_POSITIVITY: &str = "H3 nonnegativity";
pub const CHECK_SQRT_LIPSCHITZ: &str = "|Da|^2 <= C a";
pub const CHECK_ENTRY_GRADIENT: &str = "|Da_ij| <= C (sqrt a_ii + sqrt a_jj)";
pub const CHECK_TRACE: &str = "tr(A_k S)^2 <= C tr(SAS)";

/// Radius of the momentum box sampled by [`validate_pair`].
pub const SAMPLE_MOMENTUM_RADIUS: f64 = 10.0;
/// Relative slack on closed-form bounds that are attained in the limit.
const BOUND_SLACK: f64 = 1e-9;

fn radical_inverse(mut index: usize, base: usize) -> f64 {
    let mut result = 0.0;
    let mut f = 1.0 / base as f64;
    while index > 0 {
        result += f * (index % base) as f64;
        index /= base;
        f /= base as f64;
    }
    result
}

/// Deterministic sample points near the degenerate set of the catalog
/// diffusions, checked in addition to the quasi-random ones.
const PINNED_X: [f64; 7] = [0.0, 1e-4, 1.0 - 1e-4, 0.25, 0.5 - 1e-4, 0.5, 0.5 + 1e-4];

struct Sample {
    x: [f64; 2],
    p: [f64; 2],
    s: [f64; 3],
}

fn samples(dim: usize, count: usize) -> Vec<Sample> {
    let mut out = Vec::with_capacity(count + PINNED_X.len());
    for &x0 in &PINNED_X {
        out.push(Sample { x: [x0, if dim == 2 { 0.3 } else { 0.0 }], p: [0.0; 2], s: [1.0, 0.0, 0.0] });
    }
    for i in 1..=count {
        let u = [2, 3, 5, 7, 11, 13, 17].map(|b| radical_inverse(i, b));
        let x = [u[0], if dim == 2 { u[1] } else { 0.0 }];
        let p = if dim == 2 {
            let r = SAMPLE_MOMENTUM_RADIUS * u[2].sqrt();
            let (s, c) = (TWO_PI * u[3]).sin_cos();
            [r * c, r * s]
        } else {
            [SAMPLE_MOMENTUM_RADIUS * (2.0 * u[2] - 1.0), 0.0]
        };
        let mut s = [2.0 * u[4] - 1.0, 2.0 * u[5] - 1.0, 2.0 * u[6] - 1.0];
        if dim == 1 {
            s = [s[0], 0.0, 0.0];
        }
        let norm = spectral_norm(s).max(1.0);
        out.push(Sample { x, p, s: s.map(|v| v / norm) });
    }
    out
}

fn spectral_norm(s: [f64; 3]) -> f64 {
    let mean = 0.5 * (s[0] + s[2]);
    let gap = (0.25 * (s[0] - s[2]).powi(2) + s[1] * s[1]).sqrt();
    mean.abs() + gap
}

fn fmt_point(x: [f64; 2], dim: usize) -> String {
    if dim == 1 {
        format!("x = {:.6e}", x[0])
    } else {
        format!("x = ({:.6e}, {:.6e})", x[0], x[1])
    }
}

/// Tracks the worst ratio seen and where.
struct Worst {
    value: f64,
    witness: Option<String>,
}

impl Worst {
    fn new() -> Self {
        Self { value: 0.0, witness: None }
    }

    fn update(&mut self, value: f64, witness: impl FnOnce() -> String) {
        if value > self.value || (value.is_nan() && !self.value.is_nan()) {
            self.value = value;
            self.witness = Some(witness());
        }
    }

    fn outcome(self, name: &str, bound: f64) -> CheckOutcome {
        let passed = self.value.is_finite() && self.value <= bound * (1.0 + BOUND_SLACK) + 1e-12;
        CheckOutcome {
            name: name.into(),
            passed,
            empirical: self.value,
            bound,
            witness: if passed { None } else { self.witness },
        }
    }
}

/// Samples the structural hypotheses on a Hamiltonian/diffusion pair.
pub fn validate_pair(
    hamiltonian: &HamiltonianSpec,
    diffusion: &DiffusionSpec,
    dim: usize,
    sample_count: usize,
) -> Result<ValidationReport> {
    if !(1..=2).contains(&dim) {
        return Err(Error::Config(format!("dimension must be 1 or 2, got {dim}")));
    }
    hamiltonian.validate(dim)?;
    diffusion.validate(dim)?;
    let points = samples(dim, sample_count);
    let mut checks = Vec::new();

    // (H1): θ_emp is half the smallest Hessian eigenvalue.
    let mut theta = f64::INFINITY;
    let mut theta_witness = None;
    for s in &points {
        let t = 0.5 * min_eigenvalue(dim, hamiltonian.hessian_pp(s.p));
        if t < theta {
            theta = t;
            theta_witness = Some(format!("{}, p = ({:.3e}, {:.3e})", fmt_point(s.x, dim), s.p[0], s.p[1]));
        }
    }
    let declared = hamiltonian.theta();
    let passed = theta > 0.0 && theta >= declared * (1.0 - BOUND_SLACK);
    checks.push(CheckOutcome {
        name: CHECK_CONVEXITY.into(),
        passed,
        empirical: theta,
        bound: declared,
        witness: if passed { None } else { theta_witness },
    });

    // (H2)
    let mut growth = Worst::new();
    for s in &points {
        let g = hamiltonian.gradient_x(s.x, s.p);
        let ratio = g[0].hypot(g[1]) / (1.0 + s.p[0] * s.p[0] + s.p[1] * s.p[1]);
        growth.update(ratio, || format!("{}, p = ({:.3e}, {:.3e})", fmt_point(s.x, dim), s.p[0], s.p[1]));
    }
    checks.push(growth.outcome(CHECK_GROWTH, hamiltonian.growth_constant()));

    // (H3)
    let mut negativity = Worst::new();
    for s in &points {
        let lo = min_eigenvalue(dim, diffusion.matrix_at(s.x));
        negativity.update(-lo, || fmt_point(s.x, dim));
    }
    checks.push(negativity.outcome(CHECK_POSITIVITY, 0.0));

    let d2 = diffusion.second_derivative_bound();
    if diffusion.scalar_jet([0.0; 2]).is_some() {
        // Glaeser: |Da|² ≤ 2‖D²a‖∞ a.
        let mut ratio = Worst::new();
        for s in &points {
            let j = diffusion.scalar_jet(s.x).expect("scalar family");
            let g2 = j.gradient[0] * j.gradient[0] + j.gradient[1] * j.gradient[1];
            let r = if g2 == 0.0 { 0.0 } else { g2 / j.value };
            ratio.update(r, || format!("{}: |Da|^2 = {g2:.6e}, a = {:.6e}", fmt_point(s.x, dim), j.value));
        }
        checks.push(ratio.outcome(CHECK_SQRT_LIPSCHITZ, 2.0 * d2));
    } else {
        let mut entry = Worst::new();
        let mut trace = Worst::new();
        for s in &points {
            let a = diffusion.matrix_at(s.x);
            let da = diffusion.matrix_gradient(s.x);
            let diag = [a[0].max(0.0).sqrt(), a[2].max(0.0).sqrt()];
            for (e, (i, j)) in [(0, (0, 0)), (1, (0, 1)), (2, (1, 1))] {
                let g = da[0][e].hypot(da[1][e]);
                let denom = diag[i] + diag[j];
                let r = if g == 0.0 { 0.0 } else { g / denom };
                entry.update(r, || format!("{}, entry ({}, {})", fmt_point(s.x, dim), i + 1, j + 1));
            }
            let sas = trace_sas(s.s, a);
            for (k, dak) in da.iter().enumerate() {
                let t = dak[0] * s.s[0] + 2.0 * dak[1] * s.s[1] + dak[2] * s.s[2];
                let r = if t == 0.0 { 0.0 } else { t * t / sas };
                trace.update(r, || format!("{}, k = {}", fmt_point(s.x, dim), k + 1));
            }
        }
        let dimf = dim as f64;
        checks.push(entry.outcome(CHECK_ENTRY_GRADIENT, (2.0 * d2).sqrt() * dimf));
        checks.push(trace.outcome(CHECK_TRACE, 2.0 * dimf * d2));
    }
    Ok(ValidationReport { checks })
}

/// `tr(S A S)` for symmetric 2×2 matrices stored as `[m11, m12, m22]`.
fn trace_sas(s: [f64; 3], a: [f64; 3]) -> f64 {
    // (SA)_{ij} then Σ_ij (SA)_ij S_ji
    let sa = [
        [s[0] * a[0] + s[1] * a[1], s[0] * a[1] + s[1] * a[2]],
        [s[1] * a[0] + s[2] * a[1], s[1] * a[1] + s[2] * a[2]],
    ];
    let sm = [[s[0], s[1]], [s[1], s[2]]];
    (0..2).map(|i| (0..2).map(|j| sa[i][j] * sm[j][i]).sum::<f64>()).sum()
}

/// Checks the sign and row-sum conditions on a coupling matrix.
pub fn validate_coupling(c: &CouplingMatrix) -> ValidationReport {
    let m = c.size();
    let mut checks = Vec::new();
    let mut diagonal = None;
    let mut off = None;
    let mut rows = None;
    for i in 0..m {
        if diagonal.is_none() && !(c.get(i, i) > 0.0) {
            diagonal = Some(format!("c_{0}{0} = {1} is not positive", i + 1, c.get(i, i)));
        }
        for j in (0..m).filter(|&j| j != i) {
            if off.is_none() && c.get(i, j) > 0.0 {
                off = Some(format!("c_{}{} = {} is positive", i + 1, j + 1, c.get(i, j)));
            }
        }
        let sum: f64 = c.rows()[i].iter().sum();
        if rows.is_none() && sum != 0.0 {
            rows = Some(format!("row {} sums to {sum}", i + 1));
        }
    }
    for (name, witness) in [("H4 diagonal sign", diagonal), ("H4 off-diagonal sign", off), ("H4 row sums", rows)] {
        checks.push(CheckOutcome {
            name: name.into(),
            passed: witness.is_none(),
            empirical: if witness.is_none() { 0.0 } else { 1.0 },
            bound: 0.0,
            witness,
        });
    }
    ValidationReport { checks }
}

/// Default radius of the gradient box for the monotone scheme.
pub const DEFAULT_GRADIENT_BOUND: f64 = 10.0;

/// One regularized problem: Hamiltonian(s), diffusion, time scale, and added
/// viscosity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub hamiltonians: Vec<HamiltonianSpec>,
    pub diffusion: DiffusionSpec,
    pub epsilon: f64,
    pub eta: f64,
    pub coupling: Option<CouplingMatrix>,
    /// Radius of the momentum box used for the scheme's dissipation.
    pub gradient_bound: f64,
}

impl ProblemSpec {
    /// Scalar problem with the default added viscosity `η = ε⁴`.
    pub fn scalar(hamiltonian: HamiltonianSpec, diffusion: DiffusionSpec, epsilon: f64) -> Self {
        Self {
            hamiltonians: vec![hamiltonian],
            diffusion,
            epsilon,
            eta: epsilon.powi(4),
            coupling: None,
            gradient_bound: DEFAULT_GRADIENT_BOUND,
        }
    }

    pub fn system(
        hamiltonians: Vec<HamiltonianSpec>,
        diffusion: DiffusionSpec,
        coupling: CouplingMatrix,
        epsilon: f64,
    ) -> Self {
        Self {
            hamiltonians,
            diffusion,
            epsilon,
            eta: epsilon.powi(4),
            coupling: Some(coupling),
            gradient_bound: DEFAULT_GRADIENT_BOUND,
        }
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    /// Sets `ε` and resets `η = ε⁴`.
    pub fn at_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self.eta = epsilon.powi(4);
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_gradient_bound(mut self, bound: f64) -> Self {
        self.gradient_bound = bound;
        self
    }

    pub fn with_coupling(mut self, coupling: Option<CouplingMatrix>) -> Self {
        self.coupling = coupling;
        self
    }

    pub fn components(&self) -> usize {
        self.hamiltonians.len()
    }

    /// Adds `k` to every Hamiltonian.
    pub fn shifted(&self, k: f64) -> Self {
        let mut out = self.clone();
        out.hamiltonians = self.hamiltonians.iter().map(|h| h.with_shift(h.shift() + k)).collect();
        out
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be nonnegative, got {}", self.eta)));
        }
        if !(self.gradient_bound > 0.0 && self.gradient_bound.is_finite()) {
            return Err(Error::Config("gradient_bound must be positive".into()));
        }
        if self.hamiltonians.is_empty() {
            return Err(Error::Config("at least one hamiltonian is required".into()));
        }
        for h in &self.hamiltonians {
            h.validate(dim)?;
        }
        self.diffusion.validate(dim)?;
        match (&self.coupling, self.hamiltonians.len()) {
            (None, 1) => {}
            (None, m) => return Err(Error::Config(format!("{m} hamiltonians given but no coupling matrix"))),
            (Some(c), m) => {
                if c.size() != m {
                    return Err(Error::Config(format!(
                        "coupling is {}x{} but {m} hamiltonians are given",
                        c.size(),
                        c.size()
                    )));
                }
                validate_coupling(c).ensure()?;
            }
        }
        Ok(())
    }
}

/// Builds `H = ½|p|² + f` with `f = tr(A D²v) − ½|Dv|²`, for which `(v, 0)`
/// solves the cell problem exactly, and returns the sampled pair.
pub fn manufacture_ergodic(
    corrector: &Profile,
    diffusion: &DiffusionSpec,
    grid: PeriodicGrid,
) -> Result<(HamiltonianSpec, ErgodicSolution)> {
    let poly = match corrector {
        Profile::Trig { poly } => poly.clone(),
        Profile::PiecewiseLinear { .. } => {
            return Err(Error::Config(
                "manufactured corrector needs closed-form derivatives; piecewise-linear profiles have none".into(),
            ))
        }
    };
    diffusion.validate(grid.dim())?;
    let hamiltonian = HamiltonianSpec::Manufactured {
        corrector: poly.clone(),
        diffusion: diffusion.clone(),
        shift: 0.0,
        discrete_correction: false,
    };
    let residual = grid
        .nodes()
        .map(|x| {
            let v = poly.jet(x);
            let (t, _) = diffusion.contraction_jet(x, &v);
            (hamiltonian.value(x, v.gradient) - t).abs()
        })
        .fold(0.0, f64::max);
    let v = poly.sample(grid);
    let v0 = v.values()[0];
    let normalized = v.map(|value| value - v0);
    let solution = ErgodicSolution { corrector: vec![normalized], ergodic_constant: 0.0, eta: 0.0, residual };
    Ok((hamiltonian, solution))
}
