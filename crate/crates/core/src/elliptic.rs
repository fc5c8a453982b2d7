//! Space-time elliptic solve `d_tt lambda + L lambda - lambda = rhs` with
//! Neumann data in time.
//!
//! The ghost-point time operator `E` is diagonalized by closed-grid cosines,
//! so the `(N_t+1) N_n` system splits into `N_t + 1` sparse spatial systems
//! `M_i = L + (gamma_i - 1) I`, factorized once and reused for every solve.

use faer::prelude::*;
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::{SparseColMat, Triplet};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::discretization::{
    ghost_rhs_correction, second_time_difference, CsrMatrix, Field, SpatialOperator, SpectralBasis,
};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("mode matrix {mode} (gamma = {gamma:e}) is singular: {reason}")]
    SingularMode { mode: usize, gamma: f64, reason: String },
    #[error("iterative solve of mode {mode} stalled at relative residual {residual:e} after {iterations} iterations")]
    NotConverged { mode: usize, residual: f64, iterations: usize },
    #[error("full space-time system is singular")]
    SingularSystem,
    #[error("system of size {0} is too large for the dense oracle")]
    TooLarge(usize),
    #[error("residual check failed: {residual:e} exceeds {bound:e}")]
    Residual { residual: f64, bound: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Sign of the zeroth-order term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum ShiftConvention {
    /// `... - lambda`, mode matrices `L + (gamma_i - 1) I`.
    #[default]
    MinusIdentity,
    /// `... + lambda`, mode matrices `L + (gamma_i + 1) I`.
    PlusIdentity,
}

impl ShiftConvention {
    pub fn coefficient(self) -> f64 {
        match self {
            ShiftConvention::MinusIdentity => -1.0,
            ShiftConvention::PlusIdentity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum LinearSolver {
    #[default]
    Direct,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EllipticOptions {
    pub shift: ShiftConvention,
    pub solver: LinearSolver,
    /// Relative residual target of the iterative fallback.
    pub tol: f64,
    pub max_iters: usize,
    /// Bound used by the residual contract `|res| <= residual_tol (1 + |rhs|)`.
    pub residual_tol: f64,
}

impl Default for EllipticOptions {
    fn default() -> Self {
        Self {
            shift: ShiftConvention::MinusIdentity,
            solver: LinearSolver::Direct,
            tol: 1e-10,
            max_iters: 2000,
            residual_tol: 1e-8,
        }
    }
}

#[allow(clippy::large_enum_variant)]
enum ModeSolver {
    Direct(Lu<usize, f64>),
    Iterative { matrix: CsrMatrix, inv_diag: Vec<f64> },
}

pub struct EllipticSystem {
    laplacian: SpatialOperator,
    basis: SpectralBasis,
    options: EllipticOptions,
    modes: Vec<ModeSolver>,
}

impl std::fmt::Debug for EllipticSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EllipticSystem")
            .field("nodes", &self.laplacian.len())
            .field("modes", &self.modes.len())
            .field("options", &self.options)
            .finish()
    }
}

fn mode_matrix(l: &CsrMatrix, diag_shift: f64) -> CsrMatrix {
    let rows = (0..l.n_rows()).map(|i| {
        let mut row: Vec<(usize, f64)> = l.row(i).collect();
        match row.iter_mut().find(|(c, _)| *c == i) {
            Some(e) => e.1 += diag_shift,
            None => row.push((i, diag_shift)),
        }
        row
    });
    CsrMatrix::from_rows(l.n_cols(), rows)
}

fn probe_vector(n: usize) -> Vec<f64> {
    (0..n).map(|k| 1.0 + ((k * 37) % 11) as f64 / 11.0).collect()
}

pub(crate) fn factor_mode(m: &CsrMatrix, mode: usize, gamma: f64) -> Result<Lu<usize, f64>, SolverError> {
    let n = m.n_rows();
    let triplets: Vec<Triplet<usize, usize, f64>> = m.triplets().map(|(r, c, v)| Triplet::new(r, c, v)).collect();
    let singular = |reason: String| SolverError::SingularMode { mode, gamma, reason };
    let a =
        SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &triplets).map_err(|e| singular(format!("{e:?}")))?;
    let lu = a.sp_lu().map_err(|e| singular(format!("{e:?}")))?;
    let b = probe_vector(n);
    let x = lu.solve(Col::<f64>::from_fn(n, |i| b[i]));
    let xs: Vec<f64> = (0..n).map(|i| x[i]).collect();
    let ax = m.matvec(&xs);
    let res = ax.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    if xs.iter().any(|v| !v.is_finite()) || !(res <= 1e-6) {
        return Err(singular(format!("probe residual {res:e}")));
    }
    Ok(lu)
}

impl EllipticSystem {
    pub fn build(
        laplacian: SpatialOperator,
        basis: SpectralBasis,
        options: EllipticOptions,
    ) -> Result<Self, SolverError> {
        let shift = options.shift.coefficient();
        let modes = basis
            .eigenvalues()
            .par_iter()
            .enumerate()
            .map(|(i, &gamma)| {
                let m = mode_matrix(&laplacian.matrix, gamma + shift);
                match options.solver {
                    LinearSolver::Direct => factor_mode(&m, i, gamma).map(ModeSolver::Direct),
                    LinearSolver::Iterative => {
                        let diag = m.diagonal();
                        if let Some(k) = diag.iter().position(|d| *d == 0.0 || !d.is_finite()) {
                            return Err(SolverError::SingularMode {
                                mode: i,
                                gamma,
                                reason: format!("zero diagonal at row {k}"),
                            });
                        }
                        Ok(ModeSolver::Iterative { inv_diag: diag.iter().map(|d| 1.0 / d).collect(), matrix: m })
                    }
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { laplacian, basis, options, modes })
    }

    pub fn basis(&self) -> &SpectralBasis {
        &self.basis
    }

    pub fn laplacian(&self) -> &SpatialOperator {
        &self.laplacian
    }

    pub fn options(&self) -> &EllipticOptions {
        &self.options
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    fn check_shapes(&self, rhs: &Field, g0: &[f64], gt: &[f64]) -> Result<(), SolverError> {
        let (nt, nn) = rhs.shape();
        if nt != self.basis.grid().len() || nn != self.laplacian.len() || g0.len() != nn || gt.len() != nn {
            return Err(SolverError::Shape(format!(
                "rhs {nt}x{nn}, data {}/{}, system {}x{}",
                g0.len(),
                gt.len(),
                self.basis.grid().len(),
                self.laplacian.len()
            )));
        }
        Ok(())
    }

    pub fn solve(&self, rhs: &Field, g0: &[f64], gt: &[f64]) -> Result<Field, SolverError> {
        self.check_shapes(rhs, g0, gt)?;
        let grid = *self.basis.grid();
        let mut full = rhs.clone();
        full.axpy(1.0, &ghost_rhs_correction(g0, gt, &grid));
        let lambda = self.apply_inverse(&full)?;
        if cfg!(debug_assertions) {
            let residual = self.residual(&lambda, rhs, g0, gt);
            let bound = self.options.residual_tol * (1.0 + rhs.max_abs());
            if !(residual <= bound) {
                return Err(SolverError::Residual { residual, bound });
            }
        }
        Ok(lambda)
    }

    /// `(E + L -/+ I)^{-1} rhs` with homogeneous Neumann data and no
    /// residual check.
    pub fn apply_inverse(&self, rhs: &Field) -> Result<Field, SolverError> {
        let nn = rhs.n_nodes();
        if rhs.n_times() != self.basis.grid().len() || nn != self.laplacian.len() {
            return Err(SolverError::Shape(format!("rhs {}x{nn}", rhs.n_times())));
        }
        let mut coeffs = self.basis.forward(rhs);
        coeffs
            .as_mut_slice()
            .par_chunks_mut(nn)
            .zip(self.modes.par_iter())
            .enumerate()
            .try_for_each(|(i, (row, solver))| self.solve_mode(i, solver, row))?;
        Ok(self.basis.inverse(&coeffs))
    }

    fn solve_mode(&self, mode: usize, solver: &ModeSolver, row: &mut [f64]) -> Result<(), SolverError> {
        match solver {
            ModeSolver::Direct(lu) => {
                let mut b = Mat::<f64>::from_fn(row.len(), 1, |i, _| row[i]);
                lu.solve_in_place(b.as_mut());
                for (i, r) in row.iter_mut().enumerate() {
                    *r = b[(i, 0)];
                }
                Ok(())
            }
            ModeSolver::Iterative { matrix, inv_diag } => {
                let b = row.to_vec();
                let (x, residual, iterations) = gmres(matrix, inv_diag, &b, self.options.tol, self.options.max_iters);
                if !(residual <= self.options.tol) {
                    return Err(SolverError::NotConverged { mode, residual, iterations });
                }
                row.copy_from_slice(&x);
                Ok(())
            }
        }
    }

    /// Max-norm of `E lambda + L lambda -/+ lambda - (rhs + correction)`.
    pub fn residual(&self, lambda: &Field, rhs: &Field, g0: &[f64], gt: &[f64]) -> f64 {
        let grid = *self.basis.grid();
        let mut r = second_time_difference(lambda, &grid);
        r.axpy(1.0, &self.laplacian.apply_field(lambda));
        r.axpy(self.options.shift.coefficient(), lambda);
        r.axpy(-1.0, rhs);
        r.axpy(-1.0, &ghost_rhs_correction(g0, gt, &grid));
        r.max_abs()
    }
}

/// Restarted GMRES with right Jacobi preconditioning. Returns the iterate,
/// its relative residual and the iteration count.
fn gmres(a: &CsrMatrix, inv_diag: &[f64], b: &[f64], tol: f64, max_iters: usize) -> (Vec<f64>, f64, usize) {
    let out = gmres_with(
        |x| a.matvec(x),
        |v| v.iter().zip(inv_diag).map(|(vi, d)| vi * d).collect(),
        b,
        None,
        GmresOptions { tol, max_iters, restart: 60 },
    );
    (out.x, out.residual, out.iterations)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmresOptions {
    /// Target for `|b - A x| / |b|`.
    pub tol: f64,
    pub max_iters: usize,
    pub restart: usize,
}

#[derive(Debug, Clone)]
pub struct GmresOutcome {
    pub x: Vec<f64>,
    /// Relative residual `|b - A x| / |b|`, recomputed at exit.
    pub residual: f64,
    pub iterations: usize,
}

/// Restarted right-preconditioned GMRES on closures, optionally warm
/// started from `x0`.
pub fn gmres_with(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    precond: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    x0: Option<&[f64]>,
    options: GmresOptions,
) -> GmresOutcome {
    let restart = options.restart.max(1);
    let n = b.len();
    let bnorm = norm(b);
    let mut x = x0.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    if bnorm == 0.0 {
        return GmresOutcome { x: vec![0.0; n], residual: 0.0, iterations: 0 };
    }
    let residual_of = |x: &[f64]| -> Vec<f64> { b.iter().zip(apply(x)).map(|(p, q)| p - q).collect() };
    let mut iters = 0;
    loop {
        let r = residual_of(&x);
        let beta = norm(&r);
        if beta / bnorm <= options.tol || iters >= options.max_iters {
            return GmresOutcome { x, residual: beta / bnorm, iterations: iters };
        }
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|ri| ri / beta).collect()];
        let mut z_basis: Vec<Vec<f64>> = Vec::new();
        let mut h = vec![vec![0.0; restart]; restart + 1];
        let mut cs = vec![0.0; restart];
        let mut sn = vec![0.0; restart];
        let mut g = vec![0.0; restart + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..restart {
            iters += 1;
            let z = precond(&v[k]);
            let mut w = apply(&z);
            z_basis.push(z);
            for (j, vj) in v.iter().enumerate() {
                let hjk = dot(&w, vj);
                h[j][k] = hjk;
                for (wi, vi) in w.iter_mut().zip(vj) {
                    *wi -= hjk * vi;
                }
            }
            let wn = norm(&w);
            h[k + 1][k] = wn;
            for j in 0..k {
                let t = cs[j] * h[j][k] + sn[j] * h[j + 1][k];
                h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = t;
            }
            let den = (h[k][k] * h[k][k] + h[k + 1][k] * h[k + 1][k]).sqrt();
            if den == 0.0 {
                break;
            }
            cs[k] = h[k][k] / den;
            sn[k] = h[k + 1][k] / den;
            h[k][k] = den;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            if (g[k + 1].abs() / bnorm) <= options.tol || wn == 0.0 || iters >= options.max_iters {
                break;
            }
            v.push(w.iter().map(|wi| wi / wn).collect());
        }
        if k_used == 0 {
            return GmresOutcome { x, residual: beta / bnorm, iterations: iters };
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let s: f64 = (i + 1..k_used).map(|j| h[i][j] * y[j]).sum();
            y[i] = (g[i] - s) / h[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            for (xi, zi) in x.iter_mut().zip(&z_basis[j]) {
                *xi += yj * zi;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Dense LU solve of the assembled `(N_t+1) N_n` space-time system. Only
/// meant for validating the mode-decoupled path on small instances.
pub fn dense_oracle_solve(
    laplacian: &SpatialOperator,
    basis: &SpectralBasis,
    rhs: &Field,
    g0: &[f64],
    gt: &[f64],
    shift: ShiftConvention,
) -> Result<Field, SolverError> {
    let grid = *basis.grid();
    let nt = grid.len();
    let nn = laplacian.len();
    let size = nt * nn;
    if size > 5000 {
        return Err(SolverError::TooLarge(size));
    }
    if rhs.shape() != (nt, nn) || g0.len() != nn || gt.len() != nn {
        return Err(SolverError::Shape("oracle inputs do not match the system".into()));
    }
    let inv = 1.0 / (grid.dt() * grid.dt());
    let n = grid.intervals();
    let idx = |i: usize, j: usize| i * nn + j;
    let mut a = DMatrix::<f64>::zeros(size, size);
    for i in 0..nt {
        let (lo, hi) = match i {
            0 => (1, 1),
            i if i == n => (n - 1, n - 1),
            i => (i - 1, i + 1),
        };
        for j in 0..nn {
            let r = idx(i, j);
            a[(r, idx(lo, j))] += inv;
            a[(r, idx(hi, j))] += inv;
            a[(r, r)] += -2.0 * inv + shift.coefficient();
            for (k, w) in laplacian.matrix.row(j) {
                a[(r, idx(i, k))] += w;
            }
        }
    }
    let mut full = rhs.clone();
    full.axpy(1.0, &ghost_rhs_correction(g0, gt, &grid));
    let b = DVector::from_column_slice(full.as_slice());
    let x = a.lu().solve(&b).ok_or(SolverError::SingularSystem)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::SingularSystem);
    }
    Ok(Field::from_vec(nt, nn, x.as_slice().to_vec()).expect("shape checked"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretization::TimeGrid;
    use rand::{Rng, SeedableRng};

    /// Periodic second difference on a ring of `n` nodes with spacing `1/n`.
    fn ring_laplacian(n: usize) -> SpatialOperator {
        let h2 = (n * n) as f64;
        let rows = (0..n).map(|j| vec![((j + n - 1) % n, h2), (j, -2.0 * h2), ((j + 1) % n, h2)]);
        SpatialOperator { matrix: CsrMatrix::from_rows(n, rows) }
    }

    fn system(nt: usize, nn: usize, options: EllipticOptions) -> EllipticSystem {
        let basis = SpectralBasis::new(TimeGrid::new(nt).unwrap());
        EllipticSystem::build(ring_laplacian(nn), basis, options).unwrap()
    }

    #[test]
    fn zero_data_gives_zero() {
        let s = system(4, 10, EllipticOptions::default());
        assert_eq!(s.n_modes(), 5);
        let lam = s.solve(&Field::zeros(5, 10), &[0.0; 10], &[0.0; 10]).unwrap();
        assert_eq!(lam.max_abs(), 0.0);
    }

    #[test]
    fn matches_dense_oracle() {
        let s = system(4, 30, EllipticOptions::default());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let rhs = Field::from_fn(5, 30, |_, _| rng.random::<f64>() - 0.5);
        let g0: Vec<f64> = (0..30).map(|_| rng.random::<f64>() - 0.5).collect();
        let gt: Vec<f64> = (0..30).map(|_| rng.random::<f64>() - 0.5).collect();
        let fast = s.solve(&rhs, &g0, &gt).unwrap();
        let dense =
            dense_oracle_solve(s.laplacian(), s.basis(), &rhs, &g0, &gt, ShiftConvention::MinusIdentity).unwrap();
        let diff = fast.zip_map(&dense, |a, b| a - b).max_abs();
        assert!(diff <= 1e-10 * dense.max_abs(), "{diff}");
    }

    #[test]
    fn iterative_matches_direct() {
        let direct = system(6, 40, EllipticOptions::default());
        let iter = system(6, 40, EllipticOptions { solver: LinearSolver::Iterative, ..Default::default() });
        let rhs = Field::from_fn(7, 40, |i, j| ((i * 3 + j * 7) % 13) as f64 - 6.0);
        let g = vec![0.25; 40];
        let a = direct.solve(&rhs, &g, &g).unwrap();
        let b = iter.solve(&rhs, &g, &g).unwrap();
        assert!(a.zip_map(&b, |x, y| x - y).max_abs() <= 1e-8 * a.max_abs());
    }

    #[test]
    fn plus_shift_matches_its_oracle() {
        let opts = EllipticOptions { shift: ShiftConvention::PlusIdentity, ..Default::default() };
        let s = system(4, 12, opts);
        let rhs = Field::from_fn(5, 12, |i, j| (i as f64 + 1.0) * ((j % 3) as f64 - 1.0));
        let fast = s.solve(&rhs, &[0.0; 12], &[0.0; 12]).unwrap();
        let dense =
            dense_oracle_solve(s.laplacian(), s.basis(), &rhs, &[0.0; 12], &[0.0; 12], ShiftConvention::PlusIdentity)
                .unwrap();
        assert!(fast.zip_map(&dense, |a, b| a - b).max_abs() <= 1e-9 * dense.max_abs());
    }

    #[test]
    fn singular_mode_is_named() {
        let basis = SpectralBasis::new(TimeGrid::new(4).unwrap());
        let ident = SpatialOperator { matrix: CsrMatrix::from_rows(3, (0..3).map(|j| vec![(j, 1.0)])) };
        let err = EllipticSystem::build(ident, basis, EllipticOptions::default()).unwrap_err();
        match err {
            SolverError::SingularMode { mode, gamma, .. } => assert_eq!((mode, gamma), (0, 0.0)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn oracle_rejects_large_systems() {
        let basis = SpectralBasis::new(TimeGrid::new(100).unwrap());
        let l = ring_laplacian(60);
        let err = dense_oracle_solve(
            &l,
            &basis,
            &Field::zeros(101, 60),
            &[0.0; 60],
            &[0.0; 60],
            ShiftConvention::MinusIdentity,
        );
        assert!(matches!(err, Err(SolverError::TooLarge(_))));
    }
}
