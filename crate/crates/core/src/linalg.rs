//! Sparse matrices and the implicit solves used by the time steppers.
//!
//! Every implicit step solves `(βI − τ W K) x = b`, where `K` is a symmetric
//! negative-semidefinite stencil with zero row sums and `W ≥ 0` is diagonal.
//! Rows with `W = 0` are solved directly; the remaining block is made
//! symmetric by dividing through by `W` and handed to preconditioned CG.

use crate::grid::PeriodicGrid;
use crate::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|a| (a.0, a.1));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) outside {rows}x{cols}");
            if last == Some((r, c)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            col_idx.push(c);
            values.push(v);
            row_ptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self { rows, cols, row_ptr, col_idx, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).filter(|&(j, _)| j == c).map(|(_, v)| v).sum()
    }

    /// `y = A x`.
    pub fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        for (r, out) in y.iter_mut().enumerate().take(self.rows) {
            *out = self.row(r).map(|(c, v)| v * x[c]).sum();
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        self.apply_into(x, &mut y);
        y
    }

    /// `y = Aᵀ x`, computed by scattering rows.
    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate().take(self.rows) {
            for (c, v) in self.row(r) {
                y[c] += v * xr;
            }
        }
        y
    }

    pub fn transpose(&self) -> Self {
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            triplets.extend(self.row(r).map(|(c, v)| (c, r, v)));
        }
        Self::from_triplets(self.cols, self.rows, triplets)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).map(|(_, v)| v).sum()).collect()
    }
}

/// Solves a cyclic tridiagonal system in place of `rhs`.
///
/// Row `i` reads `lower[i]·x[i−1] + diag[i]·x[i] + upper[i]·x[i+1] = rhs[i]`
/// with indices taken modulo `n`. The matrix must be diagonally dominant.
pub fn solve_cyclic_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) {
    let n = diag.len();
    debug_assert!(n >= 3);
    let corner_hi = upper[n - 1];
    let corner_lo = lower[0];
    if corner_hi == 0.0 && corner_lo == 0.0 {
        thomas(lower, diag, upper, rhs, &mut vec![0.0; n]);
        return;
    }
    // Sherman–Morrison: A = B + u vᵀ with u = (γ, 0, …, 0, corner_hi),
    // v = (1, 0, …, 0, corner_lo/γ).
    let gamma = -diag[0];
    let mut b = diag.to_vec();
    b[0] -= gamma;
    b[n - 1] -= corner_hi * corner_lo / gamma;
    let mut scratch = vec![0.0; n];
    thomas(lower, &b, upper, rhs, &mut scratch);
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = corner_hi;
    thomas(lower, &b, upper, &mut u, &mut scratch);
    let vx = rhs[0] + corner_lo / gamma * rhs[n - 1];
    let vz = u[0] + corner_lo / gamma * u[n - 1];
    let factor = vx / (1.0 + vz);
    for (x, z) in rhs.iter_mut().zip(&u) {
        *x -= factor * z;
    }
}

/// Non-cyclic tridiagonal solve; ignores `lower[0]` and `upper[n−1]`.
fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64], c: &mut [f64]) {
    let n = diag.len();
    let mut denom = diag[0];
    c[0] = upper[0] / denom;
    rhs[0] /= denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * c[i - 1];
        c[i] = if i + 1 < n { upper[i] / denom } else { 0.0 };
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Preconditioned conjugate gradients for an SPD operator.
///
/// Stops when `‖r‖ ≤ tol·‖b‖`. `x` holds the initial guess on entry.
pub fn pcg(
    apply: impl Fn(&[f64], &mut [f64]),
    precondition: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iterations: usize,
) -> Result<SolveStats> {
    let n = b.len();
    let b_norm = norm(b);
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats { iterations: 0, relative_residual: 0.0 });
    }
    let mut r = vec![0.0; n];
    apply(x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut z = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut rel = norm(&r) / b_norm;
    if rel <= tol {
        return Ok(SolveStats { iterations: 0, relative_residual: rel });
    }
    precondition(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 1..=max_iterations {
        apply(&p, &mut q);
        let pq = dot(&p, &q);
        if !(pq > 0.0) {
            return Err(Error::LinearSolver { iterations: it, residual: rel });
        }
        let step = rz / pq;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * q[i];
        }
        rel = norm(&r) / b_norm;
        if rel <= tol {
            return Ok(SolveStats { iterations: it, relative_residual: rel });
        }
        precondition(&r, &mut z);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::LinearSolver { iterations: max_iterations, residual: rel })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solver for `(βI − τ W K) x = b` and its transpose `(βI − τ K W) y = g`.
#[derive(Debug, Clone)]
pub struct ShiftedDiffusion {
    grid: PeriodicGrid,
    beta: f64,
    tau: f64,
    weight: Vec<f64>,
    stencil: std::sync::Arc<CsrMatrix>,
    active: Vec<bool>,
    lines: Vec<LineFactor>,
    tol: f64,
}

/// Axis-0 tridiagonal part of the symmetrized operator along one grid line.
#[derive(Debug, Clone)]
struct LineFactor {
    nodes: Vec<usize>,
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
}

impl ShiftedDiffusion {
    /// `stencil` must be symmetric with zero row sums; `weight` must be
    /// nonnegative.
    pub fn new(
        grid: PeriodicGrid,
        beta: f64,
        tau: f64,
        weight: Vec<f64>,
        stencil: std::sync::Arc<CsrMatrix>,
        tol: f64,
    ) -> Self {
        let n = grid.points_per_axis();
        let active: Vec<bool> = weight.iter().map(|&w| w > 0.0 && tau > 0.0).collect();
        let line_count = grid.len() / n;
        let lines = (0..line_count)
            .map(|j| {
                let nodes: Vec<usize> = (0..n).map(|i| i + n * j).collect();
                let mut lower = vec![0.0; n];
                let mut diag = vec![1.0; n];
                let mut upper = vec![0.0; n];
                for (i, &k) in nodes.iter().enumerate() {
                    if !active[k] {
                        continue;
                    }
                    diag[i] = beta / weight[k] - tau * stencil.get(k, k);
                    let west = grid.shift(k, 0, -1);
                    let east = grid.shift(k, 0, 1);
                    if active[west] {
                        lower[i] = -tau * stencil.get(k, west);
                    }
                    if active[east] {
                        upper[i] = -tau * stencil.get(k, east);
                    }
                }
                LineFactor { nodes, lower, diag, upper }
            })
            .collect();
        Self { grid, beta, tau, weight, stencil, active, lines, tol }
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `(βI − τ W K) x` for verification.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let kx = self.stencil.apply(x);
        x.iter().zip(&kx).zip(&self.weight).map(|((&xi, &ki), &w)| self.beta * xi - self.tau * w * ki).collect()
    }

    pub fn solve(&self, b: &[f64]) -> Result<(Vec<f64>, SolveStats)> {
        let len = self.grid.len();
        let mut x = vec![0.0; len];
        let mut fixed = vec![0.0; len];
        let mut any_active = false;
        for k in 0..len {
            if self.active[k] {
                any_active = true;
            } else {
                x[k] = b[k] / self.beta;
                fixed[k] = x[k];
            }
        }
        if !any_active {
            return Ok((x, SolveStats { iterations: 0, relative_residual: 0.0 }));
        }
        // Active rows, divided by W: (β/W) x − τ K x = b/W. Inactive unknowns
        // are known and move to the right-hand side.
        let k_fixed = self.stencil.apply(&fixed);
        let rhs: Vec<f64> = (0..len)
            .map(|k| if self.active[k] { b[k] / self.weight[k] + self.tau * k_fixed[k] } else { 0.0 })
            .collect();
        let mut y: Vec<f64> = (0..len).map(|k| if self.active[k] { b[k] / self.beta } else { 0.0 }).collect();
        let stats = pcg(
            |p, out| self.apply_symmetrized(p, out),
            |r, out| self.precondition(r, out),
            &rhs,
            &mut y,
            self.tol,
            10 * len + 100,
        )?;
        for k in 0..len {
            if self.active[k] {
                x[k] = y[k];
            }
        }
        Ok((x, stats))
    }

    /// Solves `(βI − τ K W) y = g` through the forward solver, so that
    /// `Σ y = Σ g / β` holds independently of the iterative tolerance.
    pub fn solve_transpose(&self, g: &[f64]) -> Result<(Vec<f64>, SolveStats)> {
        let wg: Vec<f64> = g.iter().zip(&self.weight).map(|(a, w)| a * w).collect();
        let (z, stats) = self.solve(&wg)?;
        let kz = self.stencil.apply(&z);
        let y = g.iter().zip(&kz).map(|(&gi, &ki)| (gi + self.tau * ki) / self.beta).collect();
        Ok((y, stats))
    }

    /// Symmetrized active block; inactive entries are mapped to themselves.
    fn apply_symmetrized(&self, p: &[f64], out: &mut [f64]) {
        let masked: Vec<f64> = p.iter().zip(&self.active).map(|(&v, &a)| if a { v } else { 0.0 }).collect();
        self.stencil.apply_into(&masked, out);
        for k in 0..p.len() {
            out[k] = if self.active[k] { self.beta / self.weight[k] * p[k] - self.tau * out[k] } else { p[k] };
        }
    }

    fn precondition(&self, r: &[f64], out: &mut [f64]) {
        let mut buf = vec![0.0; self.grid.points_per_axis()];
        for line in &self.lines {
            for (slot, &k) in buf.iter_mut().zip(&line.nodes) {
                *slot = r[k];
            }
            solve_cyclic_tridiagonal(&line.lower, &line.diag, &line.upper, &mut buf);
            for (&v, &k) in buf.iter().zip(&line.nodes) {
                out[k] = v;
            }
        }
    }
}

/// Solver for the coupled block system
/// `(β_i I − τ W K) x_i + τ Σ_{j≠i} c_ij x_j = b_i` by block Gauss–Seidel.
#[derive(Debug, Clone)]
pub struct CoupledDiffusion {
    blocks: Vec<ShiftedDiffusion>,
    /// Off-diagonal coupling scaled by τ: `tau_c[i][j] = τ c_ij`.
    tau_c: Vec<Vec<f64>>,
}

/// Block Gauss–Seidel stops once the update falls below this relative size.
const SWEEP_TOLERANCE: f64 = 1e-15;
const MAX_SWEEPS: usize = 500;

impl CoupledDiffusion {
    pub fn new(blocks: Vec<ShiftedDiffusion>, tau_c: Vec<Vec<f64>>) -> Self {
        Self { blocks, tau_c }
    }

    pub fn components(&self) -> usize {
        self.blocks.len()
    }

    pub fn solve(&self, b: &[f64]) -> Result<(Vec<f64>, usize)> {
        self.sweep(b, false)
    }

    pub fn solve_transpose(&self, g: &[f64]) -> Result<(Vec<f64>, usize)> {
        self.sweep(g, true)
    }

    fn sweep(&self, b: &[f64], transpose: bool) -> Result<(Vec<f64>, usize)> {
        let m = self.blocks.len();
        let n = b.len() / m;
        let mut x = vec![0.0; b.len()];
        let mut iterations = 0;
        let scale = b.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(f64::MIN_POSITIVE);
        let mut last_change = f64::INFINITY;
        for _ in 0..MAX_SWEEPS {
            let mut change = 0.0f64;
            for i in 0..m {
                let mut rhs = b[i * n..(i + 1) * n].to_vec();
                for j in (0..m).filter(|&j| j != i) {
                    let c = if transpose { self.tau_c[j][i] } else { self.tau_c[i][j] };
                    if c != 0.0 {
                        for (r, xj) in rhs.iter_mut().zip(&x[j * n..(j + 1) * n]) {
                            *r -= c * xj;
                        }
                    }
                }
                let (xi, stats) =
                    if transpose { self.blocks[i].solve_transpose(&rhs)? } else { self.blocks[i].solve(&rhs)? };
                iterations += stats.iterations;
                for (old, new) in x[i * n..(i + 1) * n].iter_mut().zip(xi) {
                    change = change.max((new - *old).abs());
                    *old = new;
                }
            }
            if m == 1 || change <= SWEEP_TOLERANCE * scale || (change == 0.0) {
                return Ok((x, iterations));
            }
            // Stagnation at roundoff level counts as converged.
            if change >= last_change && change <= 1e-13 * scale {
                return Ok((x, iterations));
            }
            last_change = change;
        }
        Err(Error::LinearSolver { iterations: MAX_SWEEPS, residual: last_change / scale })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn periodic_laplacian(grid: PeriodicGrid) -> CsrMatrix {
        let inv = 1.0 / (grid.spacing() * grid.spacing());
        let mut t = Vec::new();
        for k in 0..grid.len() {
            for axis in 0..grid.dim() {
                t.push((k, grid.shift(k, axis, 1), inv));
                t.push((k, grid.shift(k, axis, -1), inv));
                t.push((k, k, -2.0 * inv));
            }
        }
        CsrMatrix::from_triplets(grid.len(), grid.len(), t)
    }

    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            let (top, rest) = a.split_at_mut(col + 1);
            let pivot = &top[col];
            for (k, r) in rest.iter_mut().enumerate() {
                let f = r[col] / pivot[col];
                for (x, p) in r[col..n].iter_mut().zip(&pivot[col..n]) {
                    *x -= f * p;
                }
                b[col + 1 + k] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
            x[row] = (b[row] - s) / a[row][row];
        }
        x
    }

    #[test]
    fn triplets_merge_duplicates() {
        let m = CsrMatrix::from_triplets(2, 2, vec![(1, 0, 1.0), (0, 1, 2.0), (1, 0, 0.5)]);
        assert_eq!(m.get(1, 0), 1.5);
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.apply(&[1.0, 1.0]), vec![2.0, 1.5]);
        assert_eq!(m.apply_transpose(&[1.0, 1.0]), vec![1.5, 2.0]);
        assert_eq!(m.transpose().get(0, 1), 1.5);
    }

    #[test]
    fn cyclic_tridiagonal_matches_dense() {
        let n = 7;
        let lower: Vec<f64> = (0..n).map(|i| -0.3 - 0.01 * i as f64).collect();
        let upper: Vec<f64> = (0..n).map(|i| -0.2 + 0.02 * i as f64).collect();
        let diag: Vec<f64> = (0..n).map(|i| 2.0 + 0.1 * i as f64).collect();
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            dense[i][i] = diag[i];
            dense[i][(i + n - 1) % n] += lower[i];
            dense[i][(i + 1) % n] += upper[i];
        }
        let expected = dense_solve(dense, rhs.clone());
        let mut x = rhs;
        solve_cyclic_tridiagonal(&lower, &diag, &upper, &mut x);
        for (a, b) in x.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn one_dimensional_solve_is_direct() {
        let grid = PeriodicGrid::new(1, 64).unwrap();
        let k = Arc::new(periodic_laplacian(grid));
        let w: Vec<f64> = grid.nodes().map(|x| 0.1 + x[0]).collect();
        let op = ShiftedDiffusion::new(grid, 1.0, 0.01, w, k, 1e-12);
        let b: Vec<f64> = grid.nodes().map(|x| (6.0 * x[0]).cos()).collect();
        let (x, stats) = op.solve(&b).unwrap();
        assert!(stats.iterations <= 1);
        let r = op.apply(&x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_weights_two_dimensional() {
        let grid = PeriodicGrid::new(2, 8).unwrap();
        let k = Arc::new(periodic_laplacian(grid));
        let w: Vec<f64> = grid.nodes().map(|x| (std::f64::consts::PI * x[0]).sin().powi(2)).collect();
        assert!(w.contains(&0.0));
        let op = ShiftedDiffusion::new(grid, 1.3, 0.02, w, k, 1e-13);
        let b: Vec<f64> = grid.nodes().map(|x| x[0] - 2.0 * x[1] * x[1]).collect();
        let (x, _) = op.solve(&b).unwrap();
        let r = op.apply(&x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-10);
        }
    }

    #[test]
    fn coupled_solve_and_transpose() {
        let grid = PeriodicGrid::new(1, 16).unwrap();
        let k = Arc::new(periodic_laplacian(grid));
        let tau = 0.05;
        let c = [[2.0, -1.5, -0.5], [-1.0, 1.0, 0.0], [0.0, -3.0, 3.0]];
        let w: Vec<f64> = grid.nodes().map(|x| 0.02 + x[0] * (1.0 - x[0])).collect();
        let blocks = (0..3)
            .map(|i| ShiftedDiffusion::new(grid, 1.0 + tau * c[i][i], tau, w.clone(), k.clone(), 1e-14))
            .collect();
        let tau_c = (0..3).map(|i| (0..3).map(|j| tau * c[i][j]).collect()).collect();
        let sys = CoupledDiffusion::new(blocks, tau_c);
        let n = grid.len();
        let mut dense = vec![vec![0.0; 3 * n]; 3 * n];
        let kd: Vec<Vec<f64>> = (0..n).map(|r| (0..n).map(|col| k.get(r, col)).collect()).collect();
        for i in 0..3 {
            for j in 0..3 {
                for r in 0..n {
                    if i == j {
                        for col in 0..n {
                            dense[i * n + r][j * n + col] = -tau * w[r] * kd[r][col];
                        }
                    }
                    dense[i * n + r][j * n + r] += if i == j { 1.0 } else { 0.0 } + tau * c[i][j];
                }
            }
        }
        let b: Vec<f64> = (0..3 * n).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let (x, _) = sys.solve(&b).unwrap();
        let expected = dense_solve(dense.clone(), b.clone());
        for (a, e) in x.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
        let dense_t: Vec<Vec<f64>> = (0..3 * n).map(|r| (0..3 * n).map(|col| dense[col][r]).collect()).collect();
        let (y, _) = sys.solve_transpose(&b).unwrap();
        let expected = dense_solve(dense_t, b.clone());
        for (a, e) in y.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
        let mass_in: f64 = b.iter().sum();
        let mass_out: f64 = y.iter().sum();
        assert!((mass_in - mass_out).abs() < 1e-12 * mass_in.abs().max(1.0));
    }

    proptest! {
        #[test]
        fn transpose_solve_is_adjoint(seed in proptest::collection::vec(-1.0f64..1.0, 32)) {
            let grid = PeriodicGrid::new(1, 16).unwrap();
            let k = Arc::new(periodic_laplacian(grid));
            let w: Vec<f64> = grid.nodes().map(|x| (3.0 * x[0]).sin().abs()).collect();
            let op = ShiftedDiffusion::new(grid, 1.0, 0.003, w, k, 1e-14);
            let (f, g) = seed.split_at(16);
            let (mf, _) = op.solve(f).unwrap();
            let (mtg, _) = op.solve_transpose(g).unwrap();
            prop_assert!((dot(&mf, g) - dot(f, &mtg)).abs() < 1e-12);
            let sg: f64 = g.iter().sum();
            let smtg: f64 = mtg.iter().sum();
            prop_assert!((sg - smtg).abs() < 1e-13);
        }
    }
}
