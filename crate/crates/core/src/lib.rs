//! Meshless dynamic optimal transport on point-cloud surfaces.
//!
//! The crate computes balanced and unbalanced (Wasserstein–Fisher–Rao)
//! dynamic optimal transport between densities living on closed surfaces
//! that are known only through sample points and unit normals.
//!
//! The pipeline is:
//!
//! 1. [`geometry`]: tangent frames, nearest-neighbor stencils and the
//!    projection of neighbors onto the center's tangent plane.
//! 2. [`rbf`]: Gaussian RBF-FD weights with polynomial augmentation for the
//!    tangent-plane Laplacian and the tangential divergence/gradient.
//! 3. [`discretization`]: time grid, ghost-point Neumann treatment, cosine
//!    eigenpairs of the time operator and the assembled sparse operators.
//! 4. [`elliptic`]: the space-time elliptic solve, decoupled into one sparse
//!    spatial system per cosine mode.
//! 5. [`admm`]: the three-step ADMM iteration and the transport cost.
//! 6. [`scenarios`]: level-set surfaces, samplers, density families and the
//!    one-dimensional validation problems.
//! 7. [`config`], [`output`] and [`cli`]: run configuration, artifacts and the
//!    command-line driver.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod admm;
pub mod cli;
pub mod config;
pub mod discretization;
pub mod elliptic;
pub mod geometry;
pub mod output;
pub mod rbf;
pub mod scenarios;

mod error;

pub use error::Error;

pub use admm::{AdmmConfig, AdmmState, IterationReport, RunOutcome, UotProblem};
pub use discretization::{Field, SpectralBasis, TimeGrid};
pub use elliptic::{EllipticOptions, EllipticSystem};
pub use geometry::{ManifoldKind, PointCloud, TangentFrame, Vec3};
pub use rbf::{KernelConfig, ShapeMode, StencilSet};
