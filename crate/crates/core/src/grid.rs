//! Uniform periodic lattices on the unit torus, finite-difference stencils and
//! quadrature.
//!
//! Node `k` of a two-dimensional grid has axis indices `(k % n, k / n)`; axis 0
//! varies fastest. All index arithmetic wraps around.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Smallest number of points per axis accepted by [`PeriodicGrid::new`].
pub const MIN_POINTS: usize = 4;

/// Uniform lattice on the `dim`-torus with `n` points per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodicGrid {
    dim: usize,
    n: usize,
    h: f64,
}

impl PeriodicGrid {
    pub fn new(dim: usize, n: usize) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::Config(format!("grid dimension must be 1 or 2, got {dim}")));
        }
        if n < MIN_POINTS {
            return Err(Error::Config(format!("grid needs at least {MIN_POINTS} points per axis, got {n}")));
        }
        Ok(Self { dim, n, h: 1.0 / n as f64 })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Points per axis.
    pub fn points_per_axis(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    /// Total number of nodes, `n^dim`.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Quadrature weight of a single node, `h^dim`.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    pub fn axis_index(&self, node: usize, axis: usize) -> usize {
        match axis {
            0 => node % self.n,
            _ => node / self.n,
        }
    }

    /// Neighbor of `node` displaced by `delta` along `axis`, with wrap-around.
    #[inline]
    pub fn shift(&self, node: usize, axis: usize, delta: isize) -> usize {
        let n = self.n as isize;
        let wrap = |i: isize| ((i % n) + n) % n;
        if axis == 0 {
            let i = (node % self.n) as isize;
            node - i as usize + wrap(i + delta) as usize
        } else {
            let j = (node / self.n) as isize;
            let i = node % self.n;
            i + self.n * wrap(j + delta) as usize
        }
    }

    /// Coordinates of a node. Unused trailing entries are zero.
    pub fn coords(&self, node: usize) -> [f64; 2] {
        let x0 = (node % self.n) as f64 / self.n as f64;
        if self.dim == 1 {
            [x0, 0.0]
        } else {
            [x0, (node / self.n) as f64 / self.n as f64]
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.len()).map(|k| self.coords(k))
    }
}

/// Grid samples of a real quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: PeriodicGrid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: PeriodicGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Mismatch(format!("field has {} values, grid has {} nodes", values.len(), grid.len())));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Config(format!("non-finite value at node {k}")));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: PeriodicGrid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: PeriodicGrid, c: f64) -> Self {
        Self { grid, values: vec![c; grid.len()] }
    }

    pub fn from_fn(grid: PeriodicGrid, f: impl Fn([f64; 2]) -> f64) -> Self {
        Self { grid, values: grid.nodes().map(f).collect() }
    }

    /// Discrete Dirac mass at `node`: `1/h^dim` there, zero elsewhere.
    pub fn dirac(grid: PeriodicGrid, node: usize) -> Self {
        let mut values = vec![0.0; grid.len()];
        values[node] = 1.0 / grid.cell_volume();
        Self { grid, values }
    }

    pub(crate) fn from_raw(grid: PeriodicGrid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> PeriodicGrid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { grid: self.grid, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a - b)
    }

    fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.grid, other.grid, "fields live on different grids");
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Self { grid: self.grid, values }
    }
}

/// One real per node per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: PeriodicGrid,
    components: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn grid(&self) -> PeriodicGrid {
        self.grid
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.components[axis]
    }

    /// Euclidean norm at each node.
    pub fn norms(&self) -> Vec<f64> {
        (0..self.grid.len()).map(|k| self.components.iter().map(|c| c[k] * c[k]).sum::<f64>().sqrt()).collect()
    }

    pub fn max_norm(&self) -> f64 {
        self.norms().into_iter().fold(0.0, f64::max)
    }
}

/// Symmetric `dim × dim` matrix per node, stored as `[a11, a12, a22]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixField {
    grid: PeriodicGrid,
    entries: Vec<[f64; 3]>,
}

/// Eigenvalues below this are treated as a loss of nonnegative-definiteness.
pub const PSD_TOLERANCE: f64 = 1e-12;

impl MatrixField {
    pub fn new(grid: PeriodicGrid, entries: Vec<[f64; 3]>) -> Result<Self> {
        if entries.len() != grid.len() {
            return Err(Error::Mismatch(format!(
                "matrix field has {} entries, grid has {} nodes",
                entries.len(),
                grid.len()
            )));
        }
        for (k, e) in entries.iter().enumerate() {
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("non-finite matrix entry at node {k}")));
            }
            let lo = min_eigenvalue(grid.dim(), *e);
            if lo < -PSD_TOLERANCE {
                return Err(Error::Config(format!(
                    "matrix at node {k} is not nonnegative definite (eigenvalue {lo:.3e})"
                )));
            }
        }
        Ok(Self { grid, entries })
    }

    pub fn from_fn(grid: PeriodicGrid, f: impl Fn([f64; 2]) -> [f64; 3]) -> Result<Self> {
        Self::new(grid, grid.nodes().map(f).collect())
    }

    pub fn identity(grid: PeriodicGrid) -> Self {
        Self { grid, entries: vec![[1.0, 0.0, 1.0]; grid.len()] }
    }

    pub fn grid(&self) -> PeriodicGrid {
        self.grid
    }

    pub fn entries(&self) -> &[[f64; 3]] {
        &self.entries
    }
}

/// Smallest eigenvalue of a symmetric matrix given as `[a11, a12, a22]`.
pub fn min_eigenvalue(dim: usize, m: [f64; 3]) -> f64 {
    if dim == 1 {
        return m[0];
    }
    let mean = 0.5 * (m[0] + m[2]);
    let half_gap = (0.25 * (m[0] - m[2]).powi(2) + m[1] * m[1]).sqrt();
    mean - half_gap
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientScheme {
    Central,
    /// Forward difference `(f_{k+1} - f_k)/h`.
    UpwindPlus,
    /// Backward difference `(f_k - f_{k-1})/h`.
    UpwindMinus,
}

pub fn gradient(f: &ScalarField, scheme: GradientScheme) -> VectorField {
    let grid = f.grid;
    let v = &f.values;
    let inv_h = 1.0 / grid.h;
    let components = (0..grid.dim)
        .map(|axis| {
            (0..grid.len())
                .map(|k| {
                    let up = v[grid.shift(k, axis, 1)];
                    let down = v[grid.shift(k, axis, -1)];
                    match scheme {
                        GradientScheme::Central => 0.5 * (up - down) * inv_h,
                        GradientScheme::UpwindPlus => (up - v[k]) * inv_h,
                        GradientScheme::UpwindMinus => (v[k] - down) * inv_h,
                    }
                })
                .collect()
        })
        .collect();
    VectorField { grid, components }
}

pub fn laplacian(f: &ScalarField) -> ScalarField {
    ScalarField::from_raw(f.grid, laplacian_values(f.grid, &f.values))
}

pub(crate) fn laplacian_values(grid: PeriodicGrid, v: &[f64]) -> Vec<f64> {
    let inv_h2 = 1.0 / (grid.h * grid.h);
    (0..grid.len())
        .map(|k| {
            (0..grid.dim).map(|axis| v[grid.shift(k, axis, 1)] - 2.0 * v[k] + v[grid.shift(k, axis, -1)]).sum::<f64>()
                * inv_h2
        })
        .collect()
}

/// Central second differences `[f_11, f_12, f_22]` at every node; the mixed
/// entry uses the four-point cross stencil. In one dimension only `f_11` is set.
pub fn second_derivatives(f: &ScalarField) -> Vec<[f64; 3]> {
    second_derivative_values(f.grid, &f.values)
}

pub(crate) fn second_derivative_values(grid: PeriodicGrid, v: &[f64]) -> Vec<[f64; 3]> {
    let inv_h2 = 1.0 / (grid.h * grid.h);
    (0..grid.len())
        .map(|k| {
            let axis = |a: usize| v[grid.shift(k, a, 1)] - 2.0 * v[k] + v[grid.shift(k, a, -1)];
            if grid.dim == 1 {
                return [axis(0) * inv_h2, 0.0, 0.0];
            }
            let e = grid.shift(k, 0, 1);
            let w = grid.shift(k, 0, -1);
            let cross =
                v[grid.shift(e, 1, 1)] - v[grid.shift(e, 1, -1)] - v[grid.shift(w, 1, 1)] + v[grid.shift(w, 1, -1)];
            [axis(0) * inv_h2, 0.25 * cross * inv_h2, axis(1) * inv_h2]
        })
        .collect()
}

/// Squared Frobenius norm of a symmetric matrix stored as `[m11, m12, m22]`.
pub fn frobenius_sq(m: [f64; 3]) -> f64 {
    m[0] * m[0] + 2.0 * m[1] * m[1] + m[2] * m[2]
}

/// `tr(A D²f)` at every node.
pub fn contract_second_derivatives(f: &ScalarField, a: &MatrixField) -> Result<ScalarField> {
    if f.grid != a.grid {
        return Err(Error::Mismatch("field and matrix field live on different grids".into()));
    }
    let d2 = second_derivatives(f);
    let values = d2.iter().zip(&a.entries).map(|(d, m)| m[0] * d[0] + 2.0 * m[1] * d[1] + m[2] * d[2]).collect();
    Ok(ScalarField::from_raw(f.grid, values))
}

/// Rectangle rule, `h^dim Σ f(x_k)`, exact for trigonometric modes below Nyquist.
pub fn integrate(f: &ScalarField) -> f64 {
    integrate_values(f.grid, &f.values)
}

pub(crate) fn integrate_values(grid: PeriodicGrid, v: &[f64]) -> f64 {
    grid.cell_volume() * v.iter().sum::<f64>()
}
