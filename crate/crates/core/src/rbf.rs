//! Gaussian RBF-FD stencils with polynomial augmentation.
//!
//! Every node gets two sets of weights over the same neighbor list:
//!
//! * `laplacian`: scalar weights `a_k` of the Laplace–Beltrami operator,
//!   computed as the flat Laplacian on the center's tangent plane after the
//!   neighbors are projected onto it;
//! * `divergence`: 3-vector weights `b_k` of the tangential derivative
//!   `(P grad)` built from a 3D Gaussian on the ambient neighbor positions.
//!   `sum_k b_k . m_k` is the surface divergence of `m` at the center and
//!   `sum_k b_k^(c) lambda_k` is component `c` of the surface gradient.
//!
//! Stencils are solved in coordinates scaled by the stencil radius so the
//! polynomial block stays `O(1)`; weights are rescaled afterwards.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{
    build_frames, GeometryError, NeighborSet, PointCloud, ProjectionMode, SpatialIndex, TangentFrame, Vec3,
};

/// Saddle systems above this 2-norm condition number are rejected.
pub const MAX_SADDLE_CONDITION: f64 = 1e16;
const BISECTION_MAX_ITERS: usize = 100;
const BISECTION_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum StencilError {
    #[error("singular or rank-deficient weight system{} (condition {condition:e}); coincident or degenerate stencil points", node_suffix(*.node))]
    Singular { node: Option<usize>, condition: f64 },
    #[error("target condition {target:e} unreachable{}; achievable range [{min_condition:e}, {max_condition:e}]", node_suffix(*.node))]
    ShapeUnreachable { node: Option<usize>, target: f64, min_condition: f64, max_condition: f64 },
    #[error("degenerate stencil{}: {reason}", node_suffix(*.node))]
    Degenerate { node: Option<usize>, reason: String },
    #[error("invalid kernel configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn node_suffix(node: Option<usize>) -> String {
    node.map(|n| format!(" at node {n}")).unwrap_or_default()
}

impl StencilError {
    fn at(self, j: usize) -> Self {
        match self {
            StencilError::Singular { condition, .. } => StencilError::Singular { node: Some(j), condition },
            StencilError::ShapeUnreachable { target, min_condition, max_condition, .. } => {
                StencilError::ShapeUnreachable { node: Some(j), target, min_condition, max_condition }
            }
            StencilError::Degenerate { reason, .. } => StencilError::Degenerate { node: Some(j), reason },
            other => other,
        }
    }
}

/// How the Gaussian shape parameter is chosen per stencil.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum ShapeMode {
    /// Use this shape parameter everywhere (physical units).
    Fixed(f64),
    /// Bisect per stencil until the interpolation matrix has this condition
    /// number.
    TargetCondition(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelConfig {
    pub shape: ShapeMode,
    pub poly_degree: usize,
    pub stencil_size: usize,
    pub projection: ProjectionMode,
    /// Also take every node tied in distance with the last regular neighbor,
    /// so symmetric clouds give symmetric stencils.
    pub include_ties: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            shape: ShapeMode::TargetCondition(1e10),
            poly_degree: 2,
            stencil_size: 7,
            projection: ProjectionMode::AlongNormal,
            include_ties: true,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self, tangent_dim: usize) -> Result<(), StencilError> {
        match self.shape {
            ShapeMode::Fixed(eps) if !(eps > 0.0 && eps.is_finite()) => {
                return Err(StencilError::InvalidConfig(format!("shape parameter must be positive, got {eps}")))
            }
            ShapeMode::TargetCondition(k) if !(k > 1.0 && k.is_finite()) => {
                return Err(StencilError::InvalidConfig(format!("target condition must exceed 1, got {k}")))
            }
            _ => {}
        }
        let mp = poly_dim(self.poly_degree, tangent_dim);
        if self.stencil_size < mp {
            return Err(StencilError::InvalidConfig(format!(
                "stencil size {} is below the {mp} polynomial terms of degree {} in {tangent_dim}D",
                self.stencil_size, self.poly_degree
            )));
        }
        Ok(())
    }
}

/// Dimension of the space of polynomials of total degree `<= degree` in `dim`
/// variables.
pub fn poly_dim(degree: usize, dim: usize) -> usize {
    let mut num = 1usize;
    let mut den = 1usize;
    for i in 1..=dim {
        num *= degree + i;
        den *= i;
    }
    num / den
}

/// Exponent tuples of all monomials of total degree `<= degree` in `dim`
/// variables, ordered by degree.
pub fn monomials(dim: usize, degree: usize) -> Vec<[u32; 3]> {
    let mut out = Vec::new();
    for total in 0..=degree as u32 {
        match dim {
            1 => out.push([total, 0, 0]),
            2 => {
                for a in (0..=total).rev() {
                    out.push([a, total - a, 0]);
                }
            }
            3 => {
                for a in (0..=total).rev() {
                    for b in (0..=total - a).rev() {
                        out.push([a, b, total - a - b]);
                    }
                }
            }
            _ => panic!("unsupported dimension {dim}"),
        }
    }
    out
}

pub fn eval_monomial(exp: &[u32; 3], x: &[f64]) -> f64 {
    x.iter().zip(exp).map(|(xi, &e)| xi.powi(e as i32)).product()
}

fn monomial_laplacian_at_origin(exp: &[u32; 3]) -> f64 {
    let total: u32 = exp.iter().sum();
    if total == 2 && exp.contains(&2) {
        2.0
    } else {
        0.0
    }
}

fn monomial_derivative_at_origin(exp: &[u32; 3], axis: usize) -> f64 {
    let total: u32 = exp.iter().sum();
    if total == 1 && exp[axis] == 1 {
        1.0
    } else {
        0.0
    }
}

/// `phi(r) = exp(-(eps r)^2)`.
pub fn gaussian(r: f64, eps: f64) -> f64 {
    (-(eps * r) * (eps * r)).exp()
}

/// Gradient of `x -> phi(|x|)` at displacement `disp`.
pub fn gaussian_gradient<const D: usize>(disp: &[f64; D], eps: f64) -> [f64; D] {
    let r2: f64 = disp.iter().map(|d| d * d).sum();
    let phi = (-eps * eps * r2).exp();
    let mut g = [0.0; D];
    for (gi, di) in g.iter_mut().zip(disp) {
        *gi = -2.0 * eps * eps * di * phi;
    }
    g
}

/// Laplacian of `x -> phi(|x|)` in `D` dimensions at displacement `disp`.
pub fn gaussian_laplacian<const D: usize>(disp: &[f64; D], eps: f64) -> f64 {
    let r2: f64 = disp.iter().map(|d| d * d).sum();
    let e2 = eps * eps;
    (4.0 * e2 * e2 * r2 - 2.0 * D as f64 * e2) * (-e2 * r2).exp()
}

fn distance<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn kernel_matrix<const D: usize>(nodes: &[[f64; D]], eps: f64) -> DMatrix<f64> {
    let n = nodes.len();
    DMatrix::from_fn(n, n, |i, k| gaussian(distance(&nodes[i], &nodes[k]), eps))
}

/// Ratio of extreme eigenvalues of a symmetric matrix; `inf` once round-off
/// makes the smallest eigenvalue nonpositive.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(a.clone());
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in eig.eigenvalues.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Shape parameter at which the Gaussian interpolation matrix on `nodes` has
/// condition number `kappa_target`.
///
/// Bisects `log(kappa(A(eps)) / kappa_target)` in `log eps`; at most 100
/// iterations, stopping early once the residual is below `1e-10`. Returns the
/// evaluated point with the smallest residual.
pub fn select_shape_parameter<const D: usize>(nodes: &[[f64; D]], kappa_target: f64) -> Result<f64, StencilError> {
    if !(kappa_target > 1.0) {
        return Err(StencilError::InvalidConfig(format!("target condition must exceed 1, got {kappa_target}")));
    }
    let mut dmin = f64::INFINITY;
    let mut dmax: f64 = 0.0;
    for i in 0..nodes.len() {
        for k in i + 1..nodes.len() {
            let d = distance(&nodes[i], &nodes[k]);
            dmin = dmin.min(d);
            dmax = dmax.max(d);
        }
    }
    if !(dmin > 0.0) || !dmin.is_finite() {
        return Err(StencilError::Degenerate { node: None, reason: "coincident or too few stencil nodes".into() });
    }
    let f = |eps: f64| (condition_number(&kernel_matrix(nodes, eps)) / kappa_target).ln();

    let mut hi = 10.0 / dmin;
    let f_hi = f(hi);
    if f_hi >= 0.0 {
        return Err(StencilError::ShapeUnreachable {
            node: None,
            target: kappa_target,
            min_condition: f_hi.exp() * kappa_target,
            max_condition: f64::INFINITY,
        });
    }
    let mut lo = 1e-3 / dmax;
    let mut f_lo = f(lo);
    let floor = 1e-12 / dmax;
    while f_lo <= 0.0 {
        if lo <= floor {
            return Err(StencilError::ShapeUnreachable {
                node: None,
                target: kappa_target,
                min_condition: f_hi.exp() * kappa_target,
                max_condition: f_lo.exp() * kappa_target,
            });
        }
        hi = lo;
        lo *= 0.1;
        f_lo = f(lo);
    }

    // near kappa ~ 1/eps_mach the computed condition number is noisy at the
    // 1e-6 level, so keep the evaluated point closest to the target
    let mut best = (f64::INFINITY, (lo * hi).sqrt());
    for _ in 0..BISECTION_MAX_ITERS {
        let mid = (lo * hi).sqrt();
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm.abs() < best.0 {
            best = (fm.abs(), mid);
        }
        if fm.abs() <= BISECTION_TOL {
            break;
        }
        if fm > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best.1)
}

/// Solution of the augmented saddle system `[A P; P^T 0] [w; mu] = [r_A; r_P]`.
#[derive(Debug, Clone)]
pub struct WeightSolution {
    /// `n x r` weights, one column per right-hand side.
    pub weights: DMatrix<f64>,
    /// `m_p x r` polynomial multipliers.
    pub multipliers: DMatrix<f64>,
    /// 2-norm condition number of the saddle matrix.
    pub condition: f64,
}

pub fn solve_weight_system(
    kernel: &DMatrix<f64>,
    poly: &DMatrix<f64>,
    rhs_kernel: &DMatrix<f64>,
    rhs_poly: &DMatrix<f64>,
) -> Result<WeightSolution, StencilError> {
    let n = kernel.nrows();
    let m = poly.ncols();
    let r = rhs_kernel.ncols();
    assert_eq!(poly.nrows(), n);
    assert_eq!(rhs_poly.nrows(), m);
    assert_eq!(rhs_poly.ncols(), r);
    let mut saddle = DMatrix::zeros(n + m, n + m);
    saddle.view_mut((0, 0), (n, n)).copy_from(kernel);
    saddle.view_mut((0, n), (n, m)).copy_from(poly);
    saddle.view_mut((n, 0), (m, n)).copy_from(&poly.transpose());

    let sv = saddle.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= MAX_SADDLE_CONDITION) {
        return Err(StencilError::Singular { node: None, condition });
    }

    let mut rhs = DMatrix::zeros(n + m, r);
    rhs.view_mut((0, 0), (n, r)).copy_from(rhs_kernel);
    rhs.view_mut((n, 0), (m, r)).copy_from(rhs_poly);
    let lu = saddle.full_piv_lu();
    let sol = lu.solve(&rhs).ok_or(StencilError::Singular { node: None, condition })?;
    Ok(WeightSolution { weights: sol.rows(0, n).into_owned(), multipliers: sol.rows(n, m).into_owned(), condition })
}

/// Linear functionals supported by [`rbf_fd_weights`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointOperator {
    Identity,
    Laplacian,
    Derivative(usize),
}

/// Plain RBF-FD weights approximating `op` at `center` from samples at
/// `nodes`, with polynomial augmentation of degree `degree` in the same
/// coordinates.
pub fn rbf_fd_weights<const D: usize>(
    nodes: &[[f64; D]],
    center: &[f64; D],
    eps: f64,
    degree: usize,
    op: PointOperator,
) -> Result<WeightSolution, StencilError> {
    let mons = monomials(D, degree);
    let kernel = kernel_matrix(nodes, eps);
    let shifted: Vec<[f64; D]> = nodes
        .iter()
        .map(|x| {
            let mut s = [0.0; D];
            for i in 0..D {
                s[i] = x[i] - center[i];
            }
            s
        })
        .collect();
    let poly = DMatrix::from_fn(nodes.len(), mons.len(), |k, l| eval_monomial(&mons[l], &shifted[k]));
    let rhs_kernel = DMatrix::from_fn(nodes.len(), 1, |k, _| {
        let mut disp = [0.0; D];
        for i in 0..D {
            disp[i] = -shifted[k][i];
        }
        match op {
            PointOperator::Identity => gaussian(distance(&disp, &[0.0; D]), eps),
            PointOperator::Laplacian => gaussian_laplacian(&disp, eps),
            PointOperator::Derivative(axis) => gaussian_gradient(&disp, eps)[axis],
        }
    });
    let rhs_poly = DMatrix::from_fn(mons.len(), 1, |l, _| match op {
        PointOperator::Identity => {
            if mons[l].iter().all(|&e| e == 0) {
                1.0
            } else {
                0.0
            }
        }
        PointOperator::Laplacian => monomial_laplacian_at_origin(&mons[l]),
        PointOperator::Derivative(axis) => monomial_derivative_at_origin(&mons[l], axis),
    });
    solve_weight_system(&kernel, &poly, &rhs_kernel, &rhs_poly)
}

/// Scalar weights of one stencil together with the shape actually used.
#[derive(Debug, Clone)]
pub struct LaplacianWeights {
    pub weights: Vec<f64>,
    pub eps: f64,
    /// Condition number of the Gaussian interpolation block.
    pub kernel_condition: f64,
}

#[derive(Debug, Clone)]
pub struct DivergenceWeights {
    pub weights: Vec<Vec3>,
    pub eps: f64,
    pub kernel_condition: f64,
}

fn scaled_shape<const D: usize>(nodes: &[[f64; D]], scale: f64, shape: ShapeMode) -> Result<f64, StencilError> {
    match shape {
        ShapeMode::Fixed(eps) => Ok(eps * scale),
        ShapeMode::TargetCondition(kappa) => select_shape_parameter(nodes, kappa),
    }
}

fn laplacian_inner<const D: usize>(
    projected: &[[f64; 2]],
    config: &KernelConfig,
) -> Result<LaplacianWeights, StencilError> {
    let scale = projected.iter().map(|q| q[..D].iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return Err(StencilError::Degenerate { node: None, reason: "all projected neighbors coincide".into() });
    }
    let nodes: Vec<[f64; D]> = projected
        .iter()
        .map(|q| {
            let mut x = [0.0; D];
            for i in 0..D {
                x[i] = q[i] / scale;
            }
            x
        })
        .collect();
    let eps = scaled_shape(&nodes, scale, config.shape)?;
    let sol = rbf_fd_weights(&nodes, &[0.0; D], eps, config.poly_degree, PointOperator::Laplacian)?;
    let kernel_condition = condition_number(&kernel_matrix(&nodes, eps));
    let inv = 1.0 / (scale * scale);
    Ok(LaplacianWeights {
        weights: sol.weights.column(0).iter().map(|a| a * inv).collect(),
        eps: eps / scale,
        kernel_condition,
    })
}

/// Tangent-plane Laplacian weights from projected neighbor coordinates (center
/// at the origin).
pub fn laplacian_stencil(
    projected: &[[f64; 2]],
    tangent_dim: usize,
    config: &KernelConfig,
) -> Result<LaplacianWeights, StencilError> {
    match tangent_dim {
        1 => laplacian_inner::<1>(projected, config),
        2 => laplacian_inner::<2>(projected, config),
        d => Err(StencilError::InvalidConfig(format!("unsupported tangent dimension {d}"))),
    }
}

/// Tangential-derivative weight vectors `b_k` from ambient neighbor positions.
///
/// The interpolation space is the 3D Gaussian on the ambient points augmented
/// with polynomials of the tangent coordinates `(s1 . y, s2 . y)`, i.e. 3D
/// polynomials composed with the tangent projector.
pub fn divergence_stencil(
    center: &Vec3,
    neighbors: &[Vec3],
    frame: &TangentFrame,
    config: &KernelConfig,
) -> Result<DivergenceWeights, StencilError> {
    let scale = neighbors.iter().map(|x| (x - center).norm()).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return Err(StencilError::Degenerate { node: None, reason: "all neighbors coincide".into() });
    }
    let ys: Vec<Vec3> = neighbors.iter().map(|x| (x - center) / scale).collect();
    let nodes: Vec<[f64; 3]> = ys.iter().map(|y| [y.x, y.y, y.z]).collect();
    let eps = scaled_shape(&nodes, scale, config.shape)?;

    let tdim = frame.tangent_dim;
    let mons = monomials(tdim, config.poly_degree);
    let tangent: Vec<[f64; 2]> = ys.iter().map(|y| frame.tangent_coords(y)).collect();
    let kernel = kernel_matrix(&nodes, eps);
    let poly = DMatrix::from_fn(ys.len(), mons.len(), |k, l| eval_monomial(&mons[l], &tangent[k][..tdim]));
    let rhs_kernel = DMatrix::from_fn(ys.len(), 3, |k, c| {
        let g = gaussian_gradient(&[-ys[k].x, -ys[k].y, -ys[k].z], eps);
        let pg = frame.projector * Vec3::new(g[0], g[1], g[2]);
        pg[c]
    });
    let basis = [frame.s1, frame.s2];
    let rhs_poly = DMatrix::from_fn(mons.len(), 3, |l, c| {
        (0..tdim).map(|axis| monomial_derivative_at_origin(&mons[l], axis) * basis[axis][c]).sum()
    });
    let sol = solve_weight_system(&kernel, &poly, &rhs_kernel, &rhs_poly)?;
    let inv = 1.0 / scale;
    let weights =
        (0..ys.len()).map(|k| Vec3::new(sol.weights[(k, 0)], sol.weights[(k, 1)], sol.weights[(k, 2)]) * inv).collect();
    Ok(DivergenceWeights { weights, eps: eps / scale, kernel_condition: condition_number(&kernel) })
}

/// All operator weights at one node.
#[derive(Debug, Clone)]
pub struct NodeStencil {
    pub neighbors: Vec<usize>,
    pub projected: Vec<[f64; 2]>,
    pub laplacian: Vec<f64>,
    pub divergence: Vec<Vec3>,
    pub eps_laplacian: f64,
    pub eps_divergence: f64,
    pub cond_laplacian: f64,
    pub cond_divergence: f64,
}

/// Per-node stencils for a whole cloud. Weights are time independent.
#[derive(Debug, Clone)]
pub struct StencilSet {
    pub config: KernelConfig,
    pub frames: Vec<TangentFrame>,
    pub nodes: Vec<NodeStencil>,
}

impl StencilSet {
    pub fn build(cloud: &PointCloud, config: &KernelConfig) -> Result<Self, StencilError> {
        config.validate(cloud.kind().tangent_dim())?;
        if cloud.len() < config.stencil_size {
            return Err(StencilError::InvalidConfig(format!(
                "cloud has {} nodes, fewer than the stencil size {}",
                cloud.len(),
                config.stencil_size
            )));
        }
        let frames = build_frames(cloud)?;
        let index = SpatialIndex::new(cloud.points());
        let nodes = (0..cloud.len())
            .into_par_iter()
            .map(|j| build_node(cloud, &frames, &index, j, config).map_err(|e| e.at(j)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { config: *config, frames, nodes })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// One line per node: `j eps_j cond a_0 .. a_{n-1}`.
    pub fn write_debug_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (j, s) in self.nodes.iter().enumerate() {
            write!(w, "{j} {:.16e} {:.16e}", s.eps_laplacian, s.cond_laplacian)?;
            for a in &s.laplacian {
                write!(w, " {a:.16e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Worst-case polynomial-exactness and row-sum defects over a stencil set.
///
/// Monomials are evaluated in coordinates scaled by each stencil's radius, and
/// every defect is divided by the weights' absolute sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct StencilAudit {
    pub nodes: usize,
    pub laplacian_poly: f64,
    pub laplacian_row_sum: f64,
    pub divergence_poly: f64,
    pub divergence_row_sum: f64,
    pub min_eps: f64,
    pub max_eps: f64,
    pub max_condition: f64,
}

impl StencilAudit {
    pub fn max_defect(&self) -> f64 {
        self.laplacian_poly.max(self.laplacian_row_sum).max(self.divergence_poly).max(self.divergence_row_sum)
    }
}

pub fn audit_stencils(cloud: &PointCloud, stencils: &StencilSet) -> StencilAudit {
    let degree = stencils.config.poly_degree;
    let mut out = StencilAudit { nodes: stencils.len(), min_eps: f64::INFINITY, ..Default::default() };
    for (j, (node, frame)) in stencils.nodes.iter().zip(&stencils.frames).enumerate() {
        let tdim = frame.tangent_dim;
        let mons = monomials(tdim, degree);
        let center = cloud.points()[j];

        let h = node.projected.iter().map(|q| q[0].hypot(q[1])).fold(0.0, f64::max);
        let abs_a: f64 = node.laplacian.iter().map(|a| a.abs()).sum();
        for exp in &mons {
            let applied: f64 = node
                .laplacian
                .iter()
                .zip(&node.projected)
                .map(|(a, q)| a * eval_monomial(exp, &[q[0] / h, q[1] / h][..tdim]))
                .sum();
            let exact = monomial_laplacian_at_origin(exp) / (h * h);
            out.laplacian_poly = out.laplacian_poly.max((applied - exact).abs() / abs_a);
        }
        let row: f64 = node.laplacian.iter().sum();
        out.laplacian_row_sum = out.laplacian_row_sum.max(row.abs() / abs_a);

        let disp: Vec<Vec3> = node.neighbors.iter().map(|&k| cloud.points()[k] - center).collect();
        let r = disp.iter().map(|d| d.norm()).fold(0.0, f64::max);
        let abs_b: f64 = node.divergence.iter().map(|b| b.norm()).sum();
        let basis = [frame.s1, frame.s2];
        for exp in &mons {
            let mut applied = Vec3::zeros();
            for (b, d) in node.divergence.iter().zip(&disp) {
                let t = frame.tangent_coords(&(d / r));
                applied += b * eval_monomial(exp, &t[..tdim]);
            }
            let exact: Vec3 = (0..tdim).map(|axis| basis[axis] * (monomial_derivative_at_origin(exp, axis) / r)).sum();
            out.divergence_poly = out.divergence_poly.max((applied - exact).norm() / abs_b);
        }
        let row: Vec3 = node.divergence.iter().sum();
        out.divergence_row_sum = out.divergence_row_sum.max(row.norm() / abs_b);

        for eps in [node.eps_laplacian, node.eps_divergence] {
            out.min_eps = out.min_eps.min(eps);
            out.max_eps = out.max_eps.max(eps);
        }
        out.max_condition = out.max_condition.max(node.cond_laplacian).max(node.cond_divergence);
    }
    out
}

fn build_node(
    cloud: &PointCloud,
    frames: &[TangentFrame],
    index: &SpatialIndex,
    j: usize,
    config: &KernelConfig,
) -> Result<NodeStencil, StencilError> {
    let neighbors = if config.include_ties {
        index.nearest_with_ties(j, config.stencil_size, 1e-9)
    } else {
        index.nearest(j, config.stencil_size)
    };
    let set = NeighborSet::build(cloud, frames, j, neighbors, config.projection)?;
    let lap = laplacian_stencil(&set.projected, frames[j].tangent_dim, config)?;
    let ambient: Vec<Vec3> = set.neighbors.iter().map(|&k| cloud.points()[k]).collect();
    let div = divergence_stencil(&cloud.points()[j], &ambient, &frames[j], config)?;
    Ok(NodeStencil {
        neighbors: set.neighbors,
        projected: set.projected,
        laplacian: lap.weights,
        divergence: div.weights,
        eps_laplacian: lap.eps,
        eps_divergence: div.eps,
        cond_laplacian: lap.kernel_condition,
        cond_divergence: div.kernel_condition,
    })
}
