//! Time grid, ghost-point time differences, cosine eigenpairs of the time
//! operator and the assembled sparse spatial operators.
//!
//! Fields are stored row-major as `(N_t + 1) x N_n`: row `i` is the time slice
//! `t_i = i dt`, column `j` the node.

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::Vec3;
use crate::rbf::StencilSet;

#[derive(Debug, Error)]
pub enum DiscretizationError {
    #[error("time grid needs at least 2 intervals, got {0}")]
    TooFewIntervals(usize),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
}

/// Uniform grid on `[0, 1]` with `n_t` intervals and `n_t + 1` nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    n_t: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(n_t: usize) -> Result<Self, DiscretizationError> {
        if n_t < 2 {
            return Err(DiscretizationError::TooFewIntervals(n_t));
        }
        Ok(Self { n_t, dt: 1.0 / n_t as f64 })
    }

    pub fn intervals(&self) -> usize {
        self.n_t
    }

    pub fn len(&self) -> usize {
        self.n_t + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.n_t {
            1.0
        } else {
            i as f64 * self.dt
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_t).map(|i| self.time(i)).collect()
    }

    /// Index of the grid node closest to `t` (ties go to the earlier node).
    pub fn nearest_index(&self, t: f64) -> usize {
        let x = (t.clamp(0.0, 1.0) * self.n_t as f64 - 0.5).ceil();
        (x.max(0.0) as usize).min(self.n_t)
    }

    /// Trapezoid weights in time.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let mut w = vec![self.dt; self.len()];
        w[0] *= 0.5;
        w[self.n_t] *= 0.5;
        w
    }
}

/// Scalar space-time field, row-major `(times x nodes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    n_times: usize,
    n_nodes: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(n_times: usize, n_nodes: usize) -> Self {
        Self { n_times, n_nodes, data: vec![0.0; n_times * n_nodes] }
    }

    pub fn from_fn(n_times: usize, n_nodes: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n_times * n_nodes);
        for i in 0..n_times {
            for j in 0..n_nodes {
                data.push(f(i, j));
            }
        }
        Self { n_times, n_nodes, data }
    }

    pub fn from_vec(n_times: usize, n_nodes: usize, data: Vec<f64>) -> Result<Self, DiscretizationError> {
        if data.len() != n_times * n_nodes {
            return Err(DiscretizationError::Shape {
                expected: format!("{n_times}x{n_nodes}"),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { n_times, n_nodes, data })
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_times, self.n_nodes)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_nodes..(i + 1) * self.n_nodes]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n_nodes..(i + 1) * self.n_nodes]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_nodes + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n_nodes + j] = v;
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `self + a * other`.
    pub fn axpy(&mut self, a: f64, other: &Field) {
        assert_eq!(self.shape(), other.shape());
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        assert_eq!(self.shape(), other.shape());
        Field {
            n_times: self.n_times,
            n_nodes: self.n_nodes,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        }
    }
}

/// Three scalar fields holding the Cartesian components of a vector field.
pub type VectorField = [Field; 3];

pub fn vector_zeros(n_times: usize, n_nodes: usize) -> VectorField {
    std::array::from_fn(|_| Field::zeros(n_times, n_nodes))
}

fn check_grid(field: &Field, grid: &TimeGrid) {
    assert_eq!(field.n_times(), grid.len(), "field rows must match the time grid");
}

/// Ghost-point second difference `E` applied along time.
pub fn second_time_difference(field: &Field, grid: &TimeGrid) -> Field {
    check_grid(field, grid);
    let n = grid.intervals();
    let inv = 1.0 / (grid.dt() * grid.dt());
    let mut out = Field::zeros(field.n_times(), field.n_nodes());
    for i in 0..=n {
        let (a, b) = match i {
            0 => (1, 1),
            i if i == n => (n - 1, n - 1),
            i => (i - 1, i + 1),
        };
        let (ra, rc, rb) = (field.row(a), field.row(i), field.row(b));
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = (ra[j] - 2.0 * rc[j] + rb[j]) * inv;
        }
    }
    out
}

/// Central differences inside, second-order one-sided formulas at both ends.
pub fn one_sided_time_derivative(field: &Field, grid: &TimeGrid) -> Field {
    check_grid(field, grid);
    let n = grid.intervals();
    let h2 = 0.5 / grid.dt();
    let mut out = Field::zeros(field.n_times(), field.n_nodes());
    for i in 0..=n {
        let row = out.row_mut(i);
        for (j, o) in row.iter_mut().enumerate() {
            *o = if i == 0 {
                (-3.0 * field.get(0, j) + 4.0 * field.get(1, j) - field.get(2, j)) * h2
            } else if i == n {
                (3.0 * field.get(n, j) - 4.0 * field.get(n - 1, j) + field.get(n - 2, j)) * h2
            } else {
                (field.get(i + 1, j) - field.get(i - 1, j)) * h2
            };
        }
    }
    out
}

/// Transpose of [`one_sided_time_derivative`] in the plain Euclidean pairing.
pub fn one_sided_time_derivative_transpose(field: &Field, grid: &TimeGrid) -> Field {
    check_grid(field, grid);
    let n = grid.intervals();
    let h2 = 0.5 / grid.dt();
    let mut out = Field::zeros(field.n_times(), field.n_nodes());
    for j in 0..field.n_nodes() {
        let mut add = |k: usize, v: f64| {
            let cur = out.get(k, j);
            out.set(k, j, cur + v * h2);
        };
        let f0 = field.get(0, j);
        add(0, -3.0 * f0);
        add(1, 4.0 * f0);
        add(2, -f0);
        let f_n = field.get(n, j);
        add(n - 2, f_n);
        add(n - 1, -4.0 * f_n);
        add(n, 3.0 * f_n);
        for i in 1..n {
            let fi = field.get(i, j);
            add(i + 1, fi);
            add(i - 1, -fi);
        }
    }
    out
}

/// Right-hand-side term produced by eliminating the ghost values with the
/// Neumann data `d_t lambda(0) = g0`, `d_t lambda(1) = gt`: row 0 carries
/// `2 g0 / dt`, the last row `-2 gt / dt`.
///
/// With this sign `E lambda - correction` approximates `d_tt lambda`, so the
/// equation `d_tt lambda + ... = rhs` becomes `E lambda + ... = rhs + correction`.
pub fn ghost_rhs_correction(g0: &[f64], gt: &[f64], grid: &TimeGrid) -> Field {
    assert_eq!(g0.len(), gt.len());
    let n = grid.intervals();
    let mut out = Field::zeros(grid.len(), g0.len());
    let s = 2.0 / grid.dt();
    for (o, g) in out.row_mut(0).iter_mut().zip(g0) {
        *o = s * g;
    }
    for (o, g) in out.row_mut(n).iter_mut().zip(gt) {
        *o = -s * g;
    }
    out
}

/// Central differences inside with the Neumann data substituted at the ends;
/// this is the first derivative consistent with the ghost-point elimination.
pub fn ghost_central_derivative(field: &Field, g0: &[f64], gt: &[f64], grid: &TimeGrid) -> Field {
    check_grid(field, grid);
    let n = grid.intervals();
    let h2 = 0.5 / grid.dt();
    let mut out = Field::zeros(field.n_times(), field.n_nodes());
    out.row_mut(0).copy_from_slice(g0);
    out.row_mut(n).copy_from_slice(gt);
    for i in 1..n {
        for j in 0..field.n_nodes() {
            out.set(i, j, (field.get(i + 1, j) - field.get(i - 1, j)) * h2);
        }
    }
    out
}

/// Eigenpairs `(gamma_i, e_i)` of `E` and the closed-grid cosine transform.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    grid: TimeGrid,
    eigenvalues: Vec<f64>,
    /// `cos_table[i * (N+1) + k] = cos(i pi k / N)`.
    cos_table: Vec<f64>,
}

impl SpectralBasis {
    pub fn new(grid: TimeGrid) -> Self {
        let n = grid.intervals();
        let dt = grid.dt();
        let eigenvalues =
            (0..=n).map(|i| (-2.0 + 2.0 * (i as f64 * std::f64::consts::PI * dt).cos()) / (dt * dt)).collect();
        let mut cos_table = Vec::with_capacity((n + 1) * (n + 1));
        for i in 0..=n {
            for k in 0..=n {
                // reduce i*k mod 2N so large products keep full accuracy
                let r = (i * k) % (2 * n);
                cos_table.push((std::f64::consts::PI * r as f64 / n as f64).cos());
            }
        }
        Self { grid, eigenvalues, cos_table }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Mode `e_i` sampled on the grid.
    pub fn mode(&self, i: usize) -> Vec<f64> {
        let m = self.grid.len();
        self.cos_table[i * m..(i + 1) * m].to_vec()
    }

    fn cos(&self, i: usize, k: usize) -> f64 {
        self.cos_table[i * self.grid.len() + k]
    }

    /// Mode coefficients of each column: `field = sum_i w_i e_i`.
    pub fn forward(&self, field: &Field) -> Field {
        check_grid(field, &self.grid);
        let n = self.grid.intervals();
        let mut out = Field::zeros(field.n_times(), field.n_nodes());
        for i in 0..=n {
            let norm = if i == 0 || i == n { n as f64 } else { 0.5 * n as f64 };
            let row = out.row_mut(i);
            for k in 0..=n {
                let half = if k == 0 || k == n { 0.5 } else { 1.0 };
                let c = half * self.cos(i, k) / norm;
                for (o, v) in row.iter_mut().zip(field.row(k)) {
                    *o += c * v;
                }
            }
        }
        out
    }

    pub fn inverse(&self, coeffs: &Field) -> Field {
        check_grid(coeffs, &self.grid);
        let n = self.grid.intervals();
        let mut out = Field::zeros(coeffs.n_times(), coeffs.n_nodes());
        for k in 0..=n {
            let row = out.row_mut(k);
            for i in 0..=n {
                let c = self.cos(i, k);
                for (o, v) in row.iter_mut().zip(coeffs.row(i)) {
                    *o += c * v;
                }
            }
        }
        out
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_rows(n_cols: usize, rows: impl IntoIterator<Item = Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for row in rows {
            for (c, v) in row {
                assert!(c < n_cols);
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Self { n_rows: row_ptr.len() - 1, n_cols, row_ptr, cols, vals }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |i| self.row(i).map(move |(c, v)| (i, c, v)))
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut rows = vec![Vec::new(); self.n_cols];
        for (i, c, v) in self.triplets() {
            rows[c].push((i, v));
        }
        CsrMatrix::from_rows(self.n_rows, rows)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.row(i).filter(|(c, _)| *c == i).map(|(_, v)| v).sum()).collect()
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n_cols);
        assert_eq!(y.len(), self.n_rows);
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(c, v)| v * x[c]).sum();
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_rows];
        self.matvec_into(x, &mut y);
        y
    }

    /// Applies the matrix to every time row of `field`.
    pub fn apply_rows(&self, field: &Field) -> Field {
        assert_eq!(field.n_nodes(), self.n_cols);
        let mut out = Field::zeros(field.n_times(), self.n_rows);
        out.as_mut_slice()
            .par_chunks_mut(self.n_rows)
            .zip(field.as_slice().par_chunks(self.n_cols))
            .for_each(|(y, x)| self.matvec_into(x, y));
        out
    }
}

/// Sparse Laplace–Beltrami matrix: row `j` holds node `j`'s weights `a_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialOperator {
    pub matrix: CsrMatrix,
}

pub fn assemble_laplacian(stencils: &StencilSet) -> SpatialOperator {
    let n = stencils.len();
    let rows = stencils.nodes.iter().map(|s| s.neighbors.iter().copied().zip(s.laplacian.iter().copied()).collect());
    SpatialOperator { matrix: CsrMatrix::from_rows(n, rows) }
}

impl SpatialOperator {
    pub fn len(&self) -> usize {
        self.matrix.n_rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix.matvec(x)
    }

    pub fn apply_field(&self, field: &Field) -> Field {
        self.matrix.apply_rows(field)
    }
}

/// Tangential derivative stencils `(P grad)_c`, one sparse matrix per
/// Rank-one correction that makes `sum_j w_j (div m)_j` vanish for every `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conservation {
    /// Weighted column sums `sum_j w_j B_c[j, k]` of the raw stencils.
    pub column_sums: [Vec<f64>; 3],
    /// `sum_j w_j`.
    pub total_weight: f64,
}

/// Stencil divergence, one sparse matrix per Cartesian component, with an
/// optional conservation correction `B - 1 c^T / A`.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceOperator {
    pub components: [CsrMatrix; 3],
    transposed: [CsrMatrix; 3],
    conservation: Option<Conservation>,
}

/// Each weight `b_k` is projected onto the tangent plane of its neighbor,
/// so the operator sees only the tangential part of the field it acts on.
pub fn assemble_divergence(stencils: &StencilSet) -> DivergenceOperator {
    let n = stencils.len();
    let components = std::array::from_fn(|c| {
        CsrMatrix::from_rows(
            n,
            stencils.nodes.iter().map(|s| {
                s.neighbors
                    .iter()
                    .zip(&s.divergence)
                    .map(|(&k, b)| (k, (stencils.frames[k].projector * b)[c]))
                    .collect()
            }),
        )
    });
    DivergenceOperator::new(components)
}

impl DivergenceOperator {
    pub fn new(components: [CsrMatrix; 3]) -> Self {
        let transposed = std::array::from_fn(|c| components[c].transpose());
        Self { components, transposed, conservation: None }
    }

    /// The same stencils with the conservation correction for quadrature
    /// weights `weights`.
    pub fn conservative(mut self, weights: &[f64]) -> Self {
        let column_sums = std::array::from_fn(|c| self.transposed[c].matvec(weights));
        self.conservation = Some(Conservation { column_sums, total_weight: weights.iter().sum() });
        self
    }

    pub fn conservation(&self) -> Option<&Conservation> {
        self.conservation.as_ref()
    }

    pub fn transposed(&self) -> &[CsrMatrix; 3] {
        &self.transposed
    }

    /// `div m` at every node of one time slice.
    pub fn divergence(&self, m: [&[f64]; 3]) -> Vec<f64> {
        let mut out = self.components[0].matvec(m[0]);
        for c in 1..3 {
            for (o, v) in out.iter_mut().zip(self.components[c].matvec(m[c])) {
                *o += v;
            }
        }
        if let Some(k) = &self.conservation {
            let shift: f64 = (0..3).map(|c| dot(&k.column_sums[c], m[c])).sum::<f64>() / k.total_weight;
            out.iter_mut().for_each(|o| *o -= shift);
        }
        out
    }

    /// Euclidean transpose of [`Self::divergence`].
    pub fn divergence_transpose(&self, mu: &[f64]) -> [Vec<f64>; 3] {
        std::array::from_fn(|c| {
            let mut out = self.transposed[c].matvec(mu);
            if let Some(k) = &self.conservation {
                let s = mu.iter().sum::<f64>() / k.total_weight;
                for (o, ck) in out.iter_mut().zip(&k.column_sums[c]) {
                    *o -= s * ck;
                }
            }
            out
        })
    }

    /// Stencil gradient: the divergence weights applied to a scalar.
    pub fn gradient(&self, lambda: &[f64]) -> [Vec<f64>; 3] {
        std::array::from_fn(|c| self.components[c].matvec(lambda))
    }

    pub fn gradient_at(&self, lambda: &[f64], j: usize) -> Vec3 {
        Vec3::from_fn(|c, _| self.components[c].row(j).map(|(k, v)| v * lambda[k]).sum())
    }

    pub fn divergence_field(&self, m: &VectorField) -> Field {
        let mut out = Field::zeros(m[0].n_times(), self.components[0].n_rows());
        for i in 0..m[0].n_times() {
            out.row_mut(i).copy_from_slice(&self.divergence([m[0].row(i), m[1].row(i), m[2].row(i)]));
        }
        out
    }

    pub fn divergence_transpose_field(&self, mu: &Field) -> VectorField {
        let (nt, _) = mu.shape();
        let n = self.components[0].n_cols();
        let mut out: VectorField = std::array::from_fn(|_| Field::zeros(nt, n));
        for i in 0..nt {
            let rows = self.divergence_transpose(mu.row(i));
            for c in 0..3 {
                out[c].row_mut(i).copy_from_slice(&rows[c]);
            }
        }
        out
    }

    pub fn gradient_field(&self, lambda: &Field) -> VectorField {
        std::array::from_fn(|c| self.components[c].apply_rows(lambda))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn column(grid: &TimeGrid, f: impl Fn(f64) -> f64) -> Field {
        Field::from_fn(grid.len(), 1, |i, _| f(grid.time(i)))
    }

    #[test]
    fn grid_layout() {
        let g = TimeGrid::new(16).unwrap();
        assert_eq!(g.len(), 17);
        assert_eq!(g.time(16), 1.0);
        assert!(TimeGrid::new(1).is_err());
        let idx: Vec<usize> = [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&t| g.nearest_index(t)).collect();
        assert_eq!(idx, vec![0, 4, 8, 12, 16]);
        assert!((g.trapezoid_weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn second_difference_hand_case() {
        let g = TimeGrid::new(2).unwrap();
        let f = Field::from_vec(3, 1, vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(second_time_difference(&f, &g).into_vec(), vec![8.0, -8.0, 8.0]);
        let c = Field::from_vec(3, 1, vec![2.5; 3]).unwrap();
        assert!(second_time_difference(&c, &g).max_abs() == 0.0);
    }

    #[test]
    fn eigenrelation_holds() {
        for n in [2, 3, 8, 33, 128] {
            let g = TimeGrid::new(n).unwrap();
            let b = SpectralBasis::new(g);
            assert_eq!(b.eigenvalues()[0], 0.0);
            assert!((b.eigenvalues()[n] + 4.0 / (g.dt() * g.dt())).abs() < 1e-9 * n as f64 * n as f64);
            for w in b.eigenvalues().windows(2) {
                assert!(w[1] < w[0]);
            }
            for i in 0..=n {
                let e = Field::from_vec(n + 1, 1, b.mode(i)).unwrap();
                let ee = second_time_difference(&e, &g);
                let scale = b.eigenvalues()[i].abs().max(1.0);
                for k in 0..=n {
                    assert!((ee.get(k, 0) - b.eigenvalues()[i] * e.get(k, 0)).abs() <= 1e-10 * scale);
                }
            }
        }
    }

    #[test]
    fn one_sided_exact_on_quadratics() {
        let g = TimeGrid::new(7).unwrap();
        let d = one_sided_time_derivative(&column(&g, |t| 3.0 * t * t - t + 2.0), &g);
        for i in 0..g.len() {
            assert!((d.get(i, 0) - (6.0 * g.time(i) - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn ghost_correction_terminal_slope() {
        let g = TimeGrid::new(10).unwrap();
        let lam = column(&g, |t| 0.5 * t * t);
        let mut e = second_time_difference(&lam, &g);
        e.axpy(-1.0, &ghost_rhs_correction(&[0.0], &[1.0], &g));
        for i in 0..g.len() {
            assert!((e.get(i, 0) - 1.0).abs() < 1e-10, "row {i}: {}", e.get(i, 0));
        }
        assert_eq!(ghost_rhs_correction(&[0.0; 3], &[0.0; 3], &g).max_abs(), 0.0);
    }

    #[test]
    fn ghost_correction_cosine_second_order() {
        let err = |n: usize| {
            let g = TimeGrid::new(n).unwrap();
            let e = second_time_difference(&column(&g, |t| (PI * t).cos()), &g);
            (0..g.len()).map(|i| (e.get(i, 0) + PI * PI * (PI * g.time(i)).cos()).abs()).fold(0.0, f64::max)
        };
        let ratio = err(16) / err(32);
        assert!(ratio > 3.8 && ratio < 4.2, "{ratio}");
    }

    #[test]
    fn spectral_endpoints() {
        let b = SpectralBasis::new(TimeGrid::new(4).unwrap());
        assert_eq!(b.mode(0), vec![1.0; 5]);
    }

    proptest! {
        #[test]
        fn transform_round_trip(n in 2usize..80, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = TimeGrid::new(n).unwrap();
            let b = SpectralBasis::new(g);
            let f = Field::from_fn(n + 1, 3, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let back = b.inverse(&b.forward(&f));
            let scale = f.max_abs();
            for (x, y) in back.as_slice().iter().zip(f.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12 * scale.max(1.0));
            }
        }
    }

    #[test]
    fn round_trip_large_grid() {
        let g = TimeGrid::new(512).unwrap();
        let b = SpectralBasis::new(g);
        let f = Field::from_fn(513, 1, |i, _| ((i * 7919) % 101) as f64 / 50.0 - 1.0);
        let back = b.inverse(&b.forward(&f));
        let err = back.as_slice().iter().zip(f.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-12 * f.max_abs(), "{err}");
    }

    #[test]
    fn csr_matvec() {
        let m = CsrMatrix::from_rows(3, vec![vec![(0, 2.0), (2, -1.0)], vec![], vec![(1, 4.0)]]);
        assert_eq!(m.matvec(&[1.0, 2.0, 3.0]), vec![-1.0, 0.0, 8.0]);
        assert_eq!(m.diagonal(), vec![2.0, 0.0, 0.0]);
        assert_eq!(m.nnz(), 3);
    }

    #[test]
    fn csr_transpose() {
        let m = CsrMatrix::from_rows(3, vec![vec![(0, 2.0), (2, -1.0)], vec![(1, 4.0)]]);
        let t = m.transpose();
        assert_eq!((t.n_rows(), t.n_cols()), (3, 2));
        assert_eq!(t.matvec(&[1.0, 2.0]), vec![2.0, 8.0, -1.0]);
    }

    #[test]
    fn time_derivative_transpose_pairing() {
        for n in [2usize, 3, 7] {
            let g = TimeGrid::new(n).unwrap();
            let x = Field::from_fn(n + 1, 2, |i, j| ((i * 5 + j * 3) % 7) as f64 - 2.5);
            let y = Field::from_fn(n + 1, 2, |i, j| ((i * 3 + j * 11) % 5) as f64 * 0.7 - 1.0);
            let dx = one_sided_time_derivative(&x, &g);
            let dty = one_sided_time_derivative_transpose(&y, &g);
            let lhs: f64 = dx.as_slice().iter().zip(y.as_slice()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.as_slice().iter().zip(dty.as_slice()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()), "{lhs} {rhs}");
        }
    }

    #[test]
    fn conservative_divergence_has_zero_weighted_sum() {
        let b = CsrMatrix::from_rows(3, vec![vec![(0, 1.0), (1, 2.0)], vec![(2, -1.0)], vec![(0, 0.5), (2, 3.0)]]);
        let empty = CsrMatrix::from_rows(3, vec![vec![], vec![], vec![]]);
        let w = [0.5, 1.0, 2.0];
        let op = DivergenceOperator::new([b, empty.clone(), empty]).conservative(&w);
        let m = [vec![1.0, -2.0, 0.25], vec![3.0; 3], vec![0.0; 3]];
        let d = op.divergence([&m[0], &m[1], &m[2]]);
        assert!(d.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>().abs() < 1e-14);
        let mu = [0.3, -1.0, 2.0];
        let t = op.divergence_transpose(&mu);
        let lhs: f64 = d.iter().zip(&mu).map(|(a, b)| a * b).sum();
        let rhs: f64 = (0..3).map(|c| t[c].iter().zip(&m[c]).map(|(a, b)| a * b).sum::<f64>()).sum();
        assert!((lhs - rhs).abs() < 1e-14);
    }
}
