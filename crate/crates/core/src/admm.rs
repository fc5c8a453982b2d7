//! ADMM for dynamic (un)balanced transport on a point cloud.
//!
//! Unknowns are `rho`, the momentum `m = rho v` and the source `f = rho g`
//! on the `(N_t + 1) x N_n` space-time grid. Each iteration performs
//!
//! 1. a pointwise proximal step on the kinetic + source cost (one quintic
//!    root per space-time point, then closed forms for `m` and `f`);
//! 2. the projection onto the discrete continuity equation;
//! 3. the scaled dual update.
//!
//! `eta = 0` selects balanced transport: the source is forced to zero.
//!
//! Step 2 comes in two flavours. [`ContinuitySolve::Spectral`] recovers the
//! barred fields from one solve of `d_tt lambda + L lambda - lambda = ...`
//! with the central time derivative and the stencil gradient. Because those
//! operators are not the adjoints of the ones in the constraint, the result
//! is only approximately feasible and the iteration can diverge on scattered
//! clouds. [`ContinuitySolve::Projection`] (the default) computes the exact
//! weighted least-squares projection onto the discrete constraint. Its normal
//! operator is a sum of Kronecker products, so a small symmetric eigenproblem
//! in time splits it into `N_t + 1` sparse spatial systems, factorized once.

use faer::prelude::*;
use faer::sparse::linalg::solvers::Lu;
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use thiserror::Error;

use crate::discretization::{
    assemble_divergence, assemble_laplacian, ghost_central_derivative, one_sided_time_derivative,
    one_sided_time_derivative_transpose, vector_zeros, CsrMatrix, DivergenceOperator, Field, SpectralBasis, TimeGrid,
    VectorField,
};
use crate::elliptic::{factor_mode, EllipticOptions, EllipticSystem, SolverError};
use crate::geometry::{PointCloud, TangentFrame, Vec3};
use crate::rbf::{KernelConfig, StencilError, StencilSet};

/// Density below which the cost integrand switches to its `(0, 0)` branch.
pub const RHO_FLOOR: f64 = 1e-12;
/// Cost recorded for points with vanishing density but nonzero flux.
pub const INFEASIBLE_COST: f64 = 1e30;

#[derive(Debug, Error)]
pub enum AdmmError {
    #[error("quintic root not bracketed for a = {a}, |m|^2 = {b2}, f^2 = {c2} (alpha = {alpha}, eta = {eta})")]
    Bracket { a: f64, b2: f64, c2: f64, alpha: f64, eta: f64 },
    #[error("continuity projection left a relative defect of {0:e}")]
    Projection(f64),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Stencil(#[from] StencilError),
}

/// `G(rho)` of the step-1 optimality condition; `a = rho_bar - p`,
/// `b2 = |m_bar - q|^2`, `c2 = (f_bar - r)^2`.
pub fn quintic_residual(rho: f64, a: f64, b2: f64, c2: f64, alpha: f64, eta: f64) -> f64 {
    let k1 = 1.0 / alpha + rho;
    if eta == 0.0 {
        return alpha * k1 * k1 * (rho - a) - 0.5 * b2;
    }
    let k2 = 2.0 / (eta * alpha) + rho;
    alpha * k2 * k2 * k1 * k1 * (rho - a) - 0.5 * b2 * k2 * k2 - c2 / eta * k1 * k1
}

/// Scale used to judge `|G|`: the leading term at the bracket end.
pub fn quintic_scale(bracket: f64, alpha: f64, eta: f64) -> f64 {
    let k1 = 1.0 / alpha + bracket;
    if eta == 0.0 {
        return alpha * k1 * k1 * (1.0 + bracket);
    }
    let k2 = 2.0 / (eta * alpha) + bracket;
    alpha * k2 * k2 * k1 * k1 * (1.0 + bracket)
}

/// Upper end of the root bracket.
pub fn quintic_bracket(a: f64, b2: f64, c2: f64, alpha: f64, eta: f64) -> f64 {
    let source = if eta == 0.0 { 0.0 } else { (c2 / (eta * alpha)).cbrt() };
    a.abs() + (b2 / (2.0 * alpha)).cbrt() + source + 1.0
}

/// The quintic divided by its positive factors: increasing and concave on
/// `rho >= 0`, with the same root.
fn reduced(rho: f64, a: f64, b2: f64, c2: f64, alpha: f64, eta: f64) -> (f64, f64) {
    let k1 = 1.0 / alpha + rho;
    let mut h = alpha * (rho - a) - 0.5 * b2 / (k1 * k1);
    let mut dh = alpha + b2 / (k1 * k1 * k1);
    if eta != 0.0 {
        let k2 = 2.0 / (eta * alpha) + rho;
        h -= c2 / eta / (k2 * k2);
        dh += 2.0 * c2 / eta / (k2 * k2 * k2);
    }
    (h, dh)
}

/// Nonnegative root of the step-1 quintic (zero when the root is negative).
/// Returns `(rho, |G(rho)| / scale)`.
pub fn solve_quintic(a: f64, b2: f64, c2: f64, alpha: f64, eta: f64) -> Result<(f64, f64), AdmmError> {
    let (h0, _) = reduced(0.0, a, b2, c2, alpha, eta);
    if h0 >= 0.0 {
        return Ok((0.0, 0.0));
    }
    let upper = quintic_bracket(a, b2, c2, alpha, eta);
    let (hb, _) = reduced(upper, a, b2, c2, alpha, eta);
    if !(hb > 0.0) {
        return Err(AdmmError::Bracket { a, b2, c2, alpha, eta });
    }
    let scale = quintic_scale(upper, alpha, eta);
    // Newton from the left never overshoots a concave increasing function.
    let mut rho = 0.0;
    let mut converged = false;
    for _ in 0..100 {
        let (h, dh) = reduced(rho, a, b2, c2, alpha, eta);
        let next = (rho - h / dh).min(upper);
        if !(next > rho) {
            converged = true;
            break;
        }
        rho = next;
        if h.abs() <= 1e-15 * alpha * (1.0 + rho + a.abs()) {
            converged = true;
            break;
        }
    }
    if !converged {
        let (mut lo, mut hi) = (0.0, upper);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if reduced(mid, a, b2, c2, alpha, eta).0 < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        rho = 0.5 * (lo + hi);
    }
    Ok((rho, quintic_residual(rho, a, b2, c2, alpha, eta).abs() / scale))
}

/// All nine space-time fields.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub rho: Field,
    pub m: VectorField,
    pub f: Field,
    pub rho_bar: Field,
    pub m_bar: VectorField,
    pub f_bar: Field,
    pub p: Field,
    pub q: VectorField,
    pub r: Field,
    /// Multiplier of the continuity constraint from the last projection.
    pub multiplier: Field,
    pub iteration: usize,
}

impl AdmmState {
    /// Linear-in-time density between the boundary data, everything else zero.
    pub fn initial(grid: &TimeGrid, rho0: &[f64], rho_t: &[f64]) -> Self {
        let nt = grid.len();
        let nn = rho0.len();
        let rho = Field::from_fn(nt, nn, |i, j| {
            let t = grid.time(i);
            (1.0 - t) * rho0[j] + t * rho_t[j]
        });
        Self {
            rho_bar: rho.clone(),
            rho,
            m: vector_zeros(nt, nn),
            f: Field::zeros(nt, nn),
            m_bar: vector_zeros(nt, nn),
            f_bar: Field::zeros(nt, nn),
            p: Field::zeros(nt, nn),
            q: vector_zeros(nt, nn),
            r: Field::zeros(nt, nn),
            multiplier: Field::zeros(nt, nn),
            iteration: 0,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.rho.shape()
    }
}

/// Cloud, discrete operators, boundary densities and the two cost weights.
#[derive(Debug)]
pub struct UotProblem {
    pub cloud: PointCloud,
    pub stencils: StencilSet,
    pub divergence: DivergenceOperator,
    projector: ContinuityProjector,
    pub system: EllipticSystem,
    pub rho0: Vec<f64>,
    pub rho_t: Vec<f64>,
    /// Augmented-Lagrangian penalty.
    pub alpha: f64,
    /// Source coefficient; zero means balanced transport.
    pub eta: f64,
}

impl UotProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cloud: PointCloud,
        rho0: Vec<f64>,
        rho_t: Vec<f64>,
        kernel: &KernelConfig,
        n_t: usize,
        alpha: f64,
        eta: f64,
        elliptic: EllipticOptions,
    ) -> Result<Self, AdmmError> {
        let stencils = StencilSet::build(&cloud, kernel)?;
        let grid = TimeGrid::new(n_t).map_err(|e| AdmmError::InvalidProblem(e.to_string()))?;
        let system = EllipticSystem::build(assemble_laplacian(&stencils), SpectralBasis::new(grid), elliptic)?;
        let divergence = assemble_divergence(&stencils);
        Self::from_parts(cloud, stencils, divergence, system, rho0, rho_t, alpha, eta)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        cloud: PointCloud,
        stencils: StencilSet,
        divergence: DivergenceOperator,
        system: EllipticSystem,
        rho0: Vec<f64>,
        rho_t: Vec<f64>,
        alpha: f64,
        eta: f64,
    ) -> Result<Self, AdmmError> {
        let n = cloud.len();
        if rho0.len() != n || rho_t.len() != n {
            return Err(AdmmError::InvalidProblem(format!(
                "boundary densities have {} and {} values for {n} nodes",
                rho0.len(),
                rho_t.len()
            )));
        }
        if rho0.iter().chain(&rho_t).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(AdmmError::InvalidProblem("boundary densities must be finite and nonnegative".into()));
        }
        let mass0: f64 = rho0.iter().zip(cloud.weights()).map(|(a, b)| a * b).sum();
        if !(mass0 > 0.0) {
            return Err(AdmmError::InvalidProblem("initial density has zero mass".into()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(AdmmError::InvalidProblem(format!("alpha must be positive, got {alpha}")));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(AdmmError::InvalidProblem(format!("eta must be nonnegative, got {eta}")));
        }
        let divergence = divergence.conservative(cloud.weights());
        let projector = ContinuityProjector::build(system.basis().grid(), cloud.weights(), &divergence, eta == 0.0)?;
        Ok(Self { cloud, stencils, divergence, projector, system, rho0, rho_t, alpha, eta })
    }

    pub fn grid(&self) -> &TimeGrid {
        self.system.basis().grid()
    }

    pub fn frames(&self) -> &[TangentFrame] {
        &self.stencils.frames
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum ContinuitySolve {
    #[default]
    Projection,
    Spectral,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdmmConfig {
    /// Stop once primal and dual residuals drop below `tol` times their
    /// first-iteration values.
    pub tol: f64,
    pub max_iters: usize,
    /// Project `m_bar` onto the tangent planes after each step 2.
    pub project_tangential: bool,
    pub continuity: ContinuitySolve,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self { tol: 1e-4, max_iters: 3000, project_tangential: false, continuity: ContinuitySolve::Projection }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IterationReport {
    pub iter: usize,
    pub primal: f64,
    pub dual: f64,
    /// Relative defect of `d_t rho_bar + div m_bar - f_bar` after step 2.
    pub continuity: f64,
    pub wfr: f64,
    /// Points that hit the infeasible branch of the cost.
    pub infeasible: usize,
    /// Largest `|G(rho*)| / scale` over the step-1 roots.
    pub quintic: f64,
    pub min_rho: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: AdmmState,
    pub reports: Vec<IterationReport>,
    pub converged: bool,
}

/// Step 1: pointwise proximal update of `(rho, m, f)`. Returns the largest
/// normalized quintic residual.
pub fn step1_update(state: &mut AdmmState, alpha: f64, eta: f64) -> Result<f64, AdmmError> {
    let len = state.rho.as_slice().len();
    let rho_bar = state.rho_bar.as_slice();
    let p = state.p.as_slice();
    let f_bar = state.f_bar.as_slice();
    let r = state.r.as_slice();
    let mb: [&[f64]; 3] = std::array::from_fn(|c| state.m_bar[c].as_slice());
    let q: [&[f64]; 3] = std::array::from_fn(|c| state.q[c].as_slice());
    let out = (0..len)
        .into_par_iter()
        .map(|k| {
            let a = rho_bar[k] - p[k];
            let b = Vec3::new(mb[0][k] - q[0][k], mb[1][k] - q[1][k], mb[2][k] - q[2][k]);
            let c = if eta == 0.0 { 0.0 } else { f_bar[k] - r[k] };
            let (rho, res) = solve_quintic(a, b.norm_squared(), c * c, alpha, eta)?;
            let m = b * (alpha * rho / (1.0 + alpha * rho));
            let f = if eta == 0.0 { 0.0 } else { c * (eta * alpha * rho / (2.0 + eta * alpha * rho)) };
            Ok((rho, m, f, res))
        })
        .collect::<Result<Vec<_>, AdmmError>>()?;
    let mut worst: f64 = 0.0;
    for (k, (rho, m, f, res)) in out.into_iter().enumerate() {
        state.rho.as_mut_slice()[k] = rho;
        for c in 0..3 {
            state.m[c].as_mut_slice()[k] = m[c];
        }
        state.f.as_mut_slice()[k] = f;
        worst = worst.max(res);
    }
    Ok(worst)
}

/// Step 2: projection onto the discrete continuity equation.
pub fn step2_update(state: &mut AdmmState, problem: &UotProblem, config: &AdmmConfig) -> Result<(), AdmmError> {
    match config.continuity {
        ContinuitySolve::Spectral => step2_spectral(state, problem),
        ContinuitySolve::Projection => step2_projection(state, problem),
    }
}

fn step2_spectral(state: &mut AdmmState, problem: &UotProblem) -> Result<(), AdmmError> {
    let grid = *problem.grid();
    let s_rho = state.rho.zip_map(&state.p, |a, b| a + b);
    let s_m: VectorField = std::array::from_fn(|c| state.m[c].zip_map(&state.q[c], |a, b| a + b));
    let s_f = if problem.eta == 0.0 {
        Field::zeros(grid.len(), problem.cloud.len())
    } else {
        state.f.zip_map(&state.r, |a, b| a + b)
    };

    let mut rhs = one_sided_time_derivative(&s_rho, &grid);
    rhs.axpy(1.0, &problem.divergence.divergence_field(&s_m));
    for v in rhs.as_mut_slice() {
        *v = -*v;
    }
    rhs.axpy(1.0, &s_f);
    let n = grid.intervals();
    let g0: Vec<f64> = problem.rho0.iter().zip(s_rho.row(0)).map(|(a, b)| a - b).collect();
    let gt: Vec<f64> = problem.rho_t.iter().zip(s_rho.row(n)).map(|(a, b)| a - b).collect();
    let lambda = problem.system.solve(&rhs, &g0, &gt)?;
    state.multiplier = lambda.clone();

    let mut rho_bar = s_rho;
    rho_bar.axpy(1.0, &ghost_central_derivative(&lambda, &g0, &gt, &grid));
    let grad = problem.divergence.gradient_field(&lambda);
    let mut m_bar = s_m;
    for c in 0..3 {
        m_bar[c].axpy(1.0, &grad[c]);
    }
    let f_bar = if problem.eta == 0.0 {
        Field::zeros(grid.len(), problem.cloud.len())
    } else {
        let mut f = s_f;
        f.axpy(1.0, &lambda);
        f
    };
    state.rho_bar = rho_bar;
    state.m_bar = m_bar;
    state.f_bar = f_bar;
    Ok(())
}

/// Discrete constraint `D rho + B m - f` (with `f` dropped when balanced),
/// `rho` carrying its boundary rows.
fn continuity_operator(problem: &UotProblem, rho: &Field, m: &VectorField, f: Option<&Field>) -> Field {
    let mut out = one_sided_time_derivative(rho, problem.grid());
    out.axpy(1.0, &problem.divergence.divergence_field(m));
    if let Some(f) = f {
        out.axpy(-1.0, f);
    }
    out
}

struct Adjoint {
    rho: Field,
    m: VectorField,
    f: Field,
}

/// `M^{-1} A^T mu` split into its blocks; the `rho` block has zero boundary
/// rows because those values are fixed.
fn weighted_adjoint(problem: &UotProblem, inv_mass: &Field, mu: &Field) -> Adjoint {
    let grid = problem.grid();
    let n = grid.intervals();
    let mut rho = one_sided_time_derivative_transpose(mu, grid);
    rho.row_mut(0).fill(0.0);
    rho.row_mut(n).fill(0.0);
    let scale = |mut x: Field| {
        for (v, s) in x.as_mut_slice().iter_mut().zip(inv_mass.as_slice()) {
            *v *= s;
        }
        x
    };
    let rho = scale(rho);
    let [m0, m1, m2] = problem.divergence.divergence_transpose_field(mu);
    let m = [scale(m0), scale(m1), scale(m2)];
    let f = scale(mu.zip_map(mu, |a, _| -a));
    Adjoint { rho, m, f }
}

fn step2_projection(state: &mut AdmmState, problem: &UotProblem) -> Result<(), AdmmError> {
    let (nt, nn) = state.shape();
    let n = problem.grid().intervals();
    let balanced = problem.eta == 0.0;
    let inv_mass = &problem.projector.inv_mass;

    let mut rho_bar = state.rho.zip_map(&state.p, |a, b| a + b);
    rho_bar.row_mut(0).copy_from_slice(&problem.rho0);
    rho_bar.row_mut(n).copy_from_slice(&problem.rho_t);
    let mut m_bar: VectorField = std::array::from_fn(|c| state.m[c].zip_map(&state.q[c], |a, b| a + b));
    let mut f_bar = if balanced { Field::zeros(nt, nn) } else { state.f.zip_map(&state.r, |a, b| a + b) };
    let mut multiplier = Field::zeros(nt, nn);

    let norm = |x: &Field| x.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut scale = 0.0;
    // a solve plus refinement passes; these also remove the regularization
    // of the near-singular balanced modes
    for pass in 0..5 {
        let defect = continuity_operator(problem, &rho_bar, &m_bar, (!balanced).then_some(&f_bar));
        if pass == 0 {
            scale = norm(&defect).max(f64::MIN_POSITIVE);
        } else if norm(&defect) <= 1e-14 * scale {
            break;
        }
        let rhs = defect.zip_map(&defect, |a, _| -a);
        let mu = problem.projector.solve(&rhs)?;
        let adj = weighted_adjoint(problem, inv_mass, &mu);
        rho_bar.axpy(1.0, &adj.rho);
        for c in 0..3 {
            m_bar[c].axpy(1.0, &adj.m[c]);
        }
        if !balanced {
            f_bar.axpy(1.0, &adj.f);
        }
        multiplier.axpy(1.0, &mu);
    }
    let defect = continuity_operator(problem, &rho_bar, &m_bar, (!balanced).then_some(&f_bar));
    let rel = norm(&defect) / scale;
    if !(rel <= 1e-8) {
        return Err(AdmmError::Projection(rel));
    }
    state.rho_bar = rho_bar;
    state.m_bar = m_bar;
    state.f_bar = f_bar;
    state.multiplier = multiplier;
    Ok(())
}

/// Direct solver for the normal equations `A M^{-1} A^T mu = r` of the
/// continuity projection, with `M` the space-time quadrature weights.
pub struct ContinuityProjector {
    /// Orthonormal eigenvectors of the weighted time block, column per mode.
    time_modes: DMatrix<f64>,
    sqrt_tw: Vec<f64>,
    gammas: Vec<f64>,
    factors: Vec<ModeFactor>,
    inv_mass: Field,
}

/// Sparse factor of `K + c W^{-1}` plus the Woodbury data for the low-rank
/// term `U C U^T` contributed by the conservation correction.
struct ModeFactor {
    lu: Lu<usize, f64>,
    low_rank: Option<LowRank>,
}

struct LowRank {
    u: [Vec<f64>; 2],
    /// `M^{-1} U`, column per entry.
    z: [Vec<f64>; 2],
    /// `(C^{-1} + U^T M^{-1} U)^{-1}`.
    core_inv: [[f64; 2]; 2],
}

impl ModeFactor {
    fn solve_in_place(&self, row: &mut [f64]) {
        let n = row.len();
        let mut b = Mat::<f64>::from_fn(n, 1, |i, _| row[i]);
        self.lu.solve_in_place(b.as_mut());
        for (i, r) in row.iter_mut().enumerate() {
            *r = b[(i, 0)];
        }
        if let Some(lr) = &self.low_rank {
            let t = [dot(&lr.u[0], row), dot(&lr.u[1], row)];
            let s = [
                lr.core_inv[0][0] * t[0] + lr.core_inv[0][1] * t[1],
                lr.core_inv[1][0] * t[0] + lr.core_inv[1][1] * t[1],
            ];
            for (i, r) in row.iter_mut().enumerate() {
                *r -= lr.z[0][i] * s[0] + lr.z[1][i] * s[1];
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl std::fmt::Debug for ContinuityProjector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ContinuityProjector").field("gammas", &self.gammas).finish()
    }
}

impl ContinuityProjector {
    pub fn build(
        grid: &TimeGrid,
        weights: &[f64],
        divergence: &DivergenceOperator,
        balanced: bool,
    ) -> Result<Self, AdmmError> {
        let nt = grid.len();
        let n = grid.intervals();
        let nn = weights.len();
        let tw = grid.trapezoid_weights();
        // T1 = D P Tw^{-1} P D^T, P dropping the fixed boundary rows of rho.
        let identity = Field::from_fn(nt, nt, |i, j| if i == j { 1.0 } else { 0.0 });
        let mut dt = one_sided_time_derivative_transpose(&identity, grid);
        for i in 0..nt {
            let s = if i == 0 || i == n { 0.0 } else { 1.0 / tw[i] };
            for v in dt.row_mut(i) {
                *v *= s;
            }
        }
        let t1 = one_sided_time_derivative(&dt, grid);
        let sqrt_tw: Vec<f64> = tw.iter().map(|w| w.sqrt()).collect();
        let sym = DMatrix::from_fn(nt, nt, |i, j| 0.5 * (t1.get(i, j) + t1.get(j, i)) * sqrt_tw[i] * sqrt_tw[j]);
        let eig = SymmetricEigen::new(sym);

        let k = normal_divergence(divergence, weights);
        // K' = K - u 1^T - 1 u^T + beta 1 1^T = K + U C U^T, U = [u, 1], C = [[0, -1], [-1, beta]]
        let low_rank = divergence.conservation().map(|cons| {
            let a = cons.total_weight;
            let mut u = vec![0.0; nn];
            let mut beta = 0.0;
            for c in 0..3 {
                let scaled: Vec<f64> = cons.column_sums[c].iter().zip(weights).map(|(x, w)| x / w).collect();
                for (ui, v) in u.iter_mut().zip(divergence.components[c].matvec(&scaled)) {
                    *ui += v / a;
                }
                beta += dot(&cons.column_sums[c], &scaled) / (a * a);
            }
            (u, beta)
        });
        let k_scale = k.diagonal().iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let w_scale = weights.iter().fold(0.0f64, |a, w| a.max(1.0 / w));
        let floor = 1e-6 * k_scale / w_scale;
        let shift = if balanced { 0.0 } else { 1.0 };
        let gammas: Vec<f64> = eig.eigenvalues.iter().map(|g| g.max(0.0)).collect();
        let factors = gammas
            .par_iter()
            .enumerate()
            .map(|(i, &g)| {
                let coef = (g + shift).max(floor);
                let rows = (0..nn).map(|r| {
                    let mut row: Vec<(usize, f64)> = k.row(r).collect();
                    match row.iter_mut().find(|(c, _)| *c == r) {
                        Some(e) => e.1 += coef / weights[r],
                        None => row.push((r, coef / weights[r])),
                    }
                    row
                });
                let lu = factor_mode(&CsrMatrix::from_rows(nn, rows), i, g)?;
                let low_rank = low_rank.as_ref().map(|(u, beta)| {
                    let cols = [u.clone(), vec![1.0; nn]];
                    let z = cols.clone().map(|col| {
                        let mut b = Mat::<f64>::from_fn(nn, 1, |r, _| col[r]);
                        lu.solve_in_place(b.as_mut());
                        (0..nn).map(|r| b[(r, 0)]).collect::<Vec<f64>>()
                    });
                    // C^{-1} = [[-beta, -1], [-1, 0]]
                    let core = [
                        [-beta + dot(&cols[0], &z[0]), -1.0 + dot(&cols[0], &z[1])],
                        [-1.0 + dot(&cols[1], &z[0]), dot(&cols[1], &z[1])],
                    ];
                    let det = core[0][0] * core[1][1] - core[0][1] * core[1][0];
                    let core_inv = [[core[1][1] / det, -core[0][1] / det], [-core[1][0] / det, core[0][0] / det]];
                    LowRank { u: cols, z, core_inv }
                });
                Ok(ModeFactor { lu, low_rank })
            })
            .collect::<Result<Vec<_>, SolverError>>()?;
        let inv_mass = Field::from_fn(nt, nn, |i, j| 1.0 / (tw[i] * weights[j]));
        Ok(Self { time_modes: eig.eigenvectors, sqrt_tw, gammas, factors, inv_mass })
    }

    /// Eigenvalues of the weighted time block.
    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn solve(&self, rhs: &Field) -> Result<Field, AdmmError> {
        let (nt, nn) = rhs.shape();
        let q = &self.time_modes;
        let mut coeffs =
            Field::from_fn(nt, nn, |i, j| (0..nt).map(|k| q[(k, i)] * self.sqrt_tw[k] * rhs.get(k, j)).sum());
        coeffs
            .as_mut_slice()
            .par_chunks_mut(nn)
            .zip(self.factors.par_iter())
            .for_each(|(row, f)| f.solve_in_place(row));
        Ok(Field::from_fn(nt, nn, |k, j| self.sqrt_tw[k] * (0..nt).map(|i| q[(k, i)] * coeffs.get(i, j)).sum::<f64>()))
    }
}

/// `sum_c B_c W^{-1} B_c^T` as a sparse matrix.
fn normal_divergence(divergence: &DivergenceOperator, weights: &[f64]) -> CsrMatrix {
    let divergence_t = divergence.transposed();
    let n = weights.len();
    let mut rows = Vec::with_capacity(n);
    let mut acc = vec![0.0; n];
    let mut touched = Vec::new();
    for i in 0..n {
        for c in 0..3 {
            for (k, b_ik) in divergence.components[c].row(i) {
                let s = b_ik / weights[k];
                for (j, b_jk) in divergence_t[c].row(k) {
                    if acc[j] == 0.0 {
                        touched.push(j);
                    }
                    acc[j] += s * b_jk;
                    if acc[j] == 0.0 {
                        acc[j] = f64::MIN_POSITIVE;
                    }
                }
            }
        }
        touched.sort_unstable();
        touched.dedup();
        rows.push(touched.iter().map(|&j| (j, std::mem::take(&mut acc[j]))).collect::<Vec<_>>());
        touched.clear();
    }
    CsrMatrix::from_rows(n, rows)
}

/// Step 3: scaled dual update.
pub fn step3_update(state: &mut AdmmState) {
    let add = |dual: &mut Field, a: &Field, b: &Field| {
        for ((d, x), y) in dual.as_mut_slice().iter_mut().zip(a.as_slice()).zip(b.as_slice()) {
            *d += x - y;
        }
    };
    add(&mut state.p, &state.rho, &state.rho_bar);
    for c in 0..3 {
        add(&mut state.q[c], &state.m[c], &state.m_bar[c]);
    }
    add(&mut state.r, &state.f, &state.f_bar);
}

/// Transport cost of `(rho, m, f)` with node weights in space and the
/// trapezoid rule in time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostValue {
    pub value: f64,
    pub infeasible: usize,
}

pub fn wfr_cost(rho: &Field, m: &VectorField, f: &Field, weights: &[f64], grid: &TimeGrid, eta: f64) -> CostValue {
    let tw = grid.trapezoid_weights();
    let mut value = 0.0;
    let mut infeasible = 0;
    for (i, wt) in tw.iter().enumerate() {
        for (j, wx) in weights.iter().enumerate() {
            let r = rho.get(i, j);
            let mm = Vec3::new(m[0].get(i, j), m[1].get(i, j), m[2].get(i, j)).norm_squared();
            let ff = f.get(i, j);
            let local = if r > RHO_FLOOR {
                let src = if eta == 0.0 {
                    if ff.abs() > RHO_FLOOR {
                        infeasible += 1;
                        INFEASIBLE_COST
                    } else {
                        0.0
                    }
                } else {
                    ff * ff / (eta * r)
                };
                mm / (2.0 * r) + src
            } else if mm.sqrt() <= RHO_FLOOR && ff.abs() <= RHO_FLOOR {
                0.0
            } else {
                infeasible += 1;
                INFEASIBLE_COST
            };
            value += wt * wx * local;
        }
    }
    CostValue { value, infeasible }
}

fn weighted_sq(a: &Field, b: &Field, weights: &[f64], tw: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (i, wt) in tw.iter().enumerate() {
        for (j, wx) in weights.iter().enumerate() {
            let d = a.get(i, j) - b.get(i, j);
            acc += wt * wx * d * d;
        }
    }
    acc
}

fn weighted_norm_sq(a: &Field, weights: &[f64], tw: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (i, wt) in tw.iter().enumerate() {
        for (j, wx) in weights.iter().enumerate() {
            acc += wt * wx * a.get(i, j) * a.get(i, j);
        }
    }
    acc
}

/// Relative continuity defect `|d_t rho_bar + div m_bar - f_bar| /
/// (|d_t rho_bar| + |div m_bar| + |f_bar|)` in the discrete L2 norm.
pub fn continuity_residual(state: &AdmmState, problem: &UotProblem) -> f64 {
    let grid = *problem.grid();
    let tw = grid.trapezoid_weights();
    let w = problem.cloud.weights();
    let dt = one_sided_time_derivative(&state.rho_bar, &grid);
    let div = problem.divergence.divergence_field(&state.m_bar);
    let mut res = dt.clone();
    res.axpy(1.0, &div);
    res.axpy(-1.0, &state.f_bar);
    let scale = weighted_norm_sq(&dt, w, &tw).sqrt()
        + weighted_norm_sq(&div, w, &tw).sqrt()
        + weighted_norm_sq(&state.f_bar, w, &tw).sqrt();
    let r = weighted_norm_sq(&res, w, &tw).sqrt();
    if scale > 0.0 {
        r / scale
    } else {
        r
    }
}

/// Total source `sum_t sum_x f_bar w dt` with trapezoid weights in time.
pub fn total_source(state: &AdmmState, problem: &UotProblem) -> f64 {
    let tw = problem.grid().trapezoid_weights();
    let w = problem.cloud.weights();
    let mut acc = 0.0;
    for (i, wt) in tw.iter().enumerate() {
        for (j, wx) in w.iter().enumerate() {
            acc += wt * wx * state.f_bar.get(i, j);
        }
    }
    acc
}

/// `sum_x rho_bar(t_i, x) w_x` for every time slice.
pub fn mass_profile(state: &AdmmState, problem: &UotProblem) -> Vec<f64> {
    let w = problem.cloud.weights();
    (0..state.rho_bar.n_times()).map(|i| state.rho_bar.row(i).iter().zip(w).map(|(a, b)| a * b).sum()).collect()
}

fn project_tangential(m: &mut VectorField, frames: &[TangentFrame]) {
    let (nt, nn) = m[0].shape();
    for i in 0..nt {
        for (j, frame) in frames.iter().enumerate().take(nn) {
            let v = Vec3::new(m[0].get(i, j), m[1].get(i, j), m[2].get(i, j));
            let pv = frame.projector * v;
            for c in 0..3 {
                m[c].set(i, j, pv[c]);
            }
        }
    }
}

/// One full iteration; returns its report.
pub fn iterate(state: &mut AdmmState, problem: &UotProblem, config: &AdmmConfig) -> Result<IterationReport, AdmmError> {
    let alpha = problem.alpha;
    let grid = *problem.grid();
    let tw = grid.trapezoid_weights();
    let w = problem.cloud.weights();
    let prev_bar = (state.rho_bar.clone(), state.m_bar.clone(), state.f_bar.clone());

    let quintic = step1_update(state, alpha, problem.eta)?;
    step2_update(state, problem, config)?;
    if config.project_tangential {
        project_tangential(&mut state.m_bar, problem.frames());
    }
    let continuity = continuity_residual(state, problem);

    let mut primal = weighted_sq(&state.rho, &state.rho_bar, w, &tw) + weighted_sq(&state.f, &state.f_bar, w, &tw);
    let mut dual = weighted_sq(&state.rho_bar, &prev_bar.0, w, &tw) + weighted_sq(&state.f_bar, &prev_bar.2, w, &tw);
    for c in 0..3 {
        primal += weighted_sq(&state.m[c], &state.m_bar[c], w, &tw);
        dual += weighted_sq(&state.m_bar[c], &prev_bar.1[c], w, &tw);
    }
    let cost = wfr_cost(&state.rho, &state.m, &state.f, w, &grid, problem.eta);
    step3_update(state);
    state.iteration += 1;
    Ok(IterationReport {
        iter: state.iteration,
        primal: primal.sqrt(),
        dual: alpha * dual.sqrt(),
        continuity,
        wfr: cost.value,
        infeasible: cost.infeasible,
        quintic,
        min_rho: state.rho.as_slice().iter().copied().fold(f64::INFINITY, f64::min),
    })
}

/// Runs from the linear-interpolation start until both residuals fall below
/// `tol` relative to the first iteration, or `max_iters` is reached.
pub fn run(problem: &UotProblem, config: &AdmmConfig) -> Result<RunOutcome, AdmmError> {
    run_with(problem, config, |_| {})
}

/// Like [`run`] but hands every report to `observe` as soon as it exists.
pub fn run_with(
    problem: &UotProblem,
    config: &AdmmConfig,
    mut observe: impl FnMut(&IterationReport),
) -> Result<RunOutcome, AdmmError> {
    let mut state = AdmmState::initial(problem.grid(), &problem.rho0, &problem.rho_t);
    let mut reports = Vec::new();
    let mut reference: Option<(f64, f64)> = None;
    let mut converged = false;
    while state.iteration < config.max_iters {
        let report = iterate(&mut state, problem, config)?;
        observe(&report);
        reports.push(report);
        let (p0, d0) = *reference.get_or_insert((report.primal, report.dual));
        if report.primal <= config.tol * p0 && report.dual <= config.tol * d0 {
            converged = true;
            break;
        }
    }
    Ok(RunOutcome { state, reports, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bisect_root(a: f64, b2: f64, c2: f64, alpha: f64, eta: f64) -> f64 {
        let (mut lo, mut hi) = (0.0f64, quintic_bracket(a, b2, c2, alpha, eta));
        while hi - lo > 1e-13 {
            let mid = 0.5 * (lo + hi);
            if quintic_residual(mid, a, b2, c2, alpha, eta) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn trivial_roots() {
        assert_eq!(solve_quintic(0.3, 0.0, 0.0, 1.0, 1.0).unwrap().0, 0.3);
        assert_eq!(solve_quintic(-0.2, 0.0, 0.0, 1.0, 1.0).unwrap().0, 0.0);
    }

    #[test]
    fn root_matches_bisection_oracle() {
        let (rho, res) = solve_quintic(1.0, 1.0, 0.0, 1.0, 1.0).unwrap();
        let oracle = bisect_root(1.0, 1.0, 0.0, 1.0, 1.0);
        assert!((rho - oracle).abs() < 1e-10, "{rho} vs {oracle}");
        assert!(res <= 1e-12);
    }

    #[test]
    fn balanced_limit_drops_source() {
        let (rho, res) = solve_quintic(0.5, 0.4, 9.0, 2.0, 0.0).unwrap();
        let k = 0.5 + rho;
        assert!((2.0 * k * k * (rho - 0.5) - 0.2).abs() < 1e-12);
        assert!(res <= 1e-12);
    }

    proptest! {
        #[test]
        fn quintic_root_properties(
            a in -5.0f64..5.0,
            b in 0.0f64..10.0,
            c in -10.0f64..10.0,
            alpha in 0.05f64..20.0,
            eta in 0.05f64..20.0,
        ) {
            let b2 = b * b;
            let c2 = c * c;
            let upper = quintic_bracket(a, b2, c2, alpha, eta);
            prop_assert!(quintic_residual(upper, a, b2, c2, alpha, eta) > 0.0);
            let (rho, res) = solve_quintic(a, b2, c2, alpha, eta).unwrap();
            prop_assert!(rho >= 0.0);
            prop_assert!(res <= 1e-12, "residual {}", res);
            if rho > 0.0 {
                let oracle = bisect_root(a, b2, c2, alpha, eta);
                prop_assert!((rho - oracle).abs() <= 1e-9 * (1.0 + oracle));
            } else {
                prop_assert!(quintic_residual(0.0, a, b2, c2, alpha, eta) >= 0.0);
            }
            // monotone beyond the root
            let start = a.max(0.0).max(rho);
            let mut prev = quintic_residual(start, a, b2, c2, alpha, eta);
            for k in 1..20 {
                let x = start + k as f64 * 0.1 * (1.0 + upper);
                let g = quintic_residual(x, a, b2, c2, alpha, eta);
                prop_assert!(g > prev);
                prev = g;
            }
        }
    }

    #[test]
    fn dual_update_arithmetic() {
        let g = TimeGrid::new(2).unwrap();
        let mut s = AdmmState::initial(&g, &[1.0], &[1.0]);
        s.rho_bar = Field::from_vec(3, 1, vec![0.25; 3]).unwrap();
        step3_update(&mut s);
        assert_eq!(s.p.as_slice(), &[0.75; 3]);
        step3_update(&mut s);
        assert_eq!(s.p.as_slice(), &[1.5; 3]);
        let mut t = AdmmState::initial(&g, &[1.0], &[2.0]);
        step3_update(&mut t);
        assert_eq!(t.p.max_abs(), 0.0);
    }

    #[test]
    fn cost_cases() {
        let g = TimeGrid::new(2).unwrap();
        let rho = Field::from_vec(3, 1, vec![2.0; 3]).unwrap();
        let mut m = vector_zeros(3, 1);
        let f = Field::zeros(3, 1);
        assert_eq!(wfr_cost(&rho, &m, &f, &[1.0], &g, 1.0).value, 0.0);
        m[0] = Field::from_vec(3, 1, vec![2.0; 3]).unwrap();
        let c = wfr_cost(&rho, &m, &f, &[1.0], &g, 1.0);
        assert!((c.value - 1.0).abs() < 1e-15);
        let zero = Field::zeros(3, 1);
        let c = wfr_cost(&zero, &m, &f, &[1.0], &g, 1.0);
        assert_eq!(c.infeasible, 3);
        assert!(c.value >= INFEASIBLE_COST * 0.5);
    }
}
