use thiserror::Error;

use crate::admm::AdmmError;
use crate::config::ConfigError;
use crate::discretization::DiscretizationError;
use crate::elliptic::SolverError;
use crate::geometry::GeometryError;
use crate::output::OutputError;
use crate::rbf::StencilError;
use crate::scenarios::ScenarioError;

/// Top-level error for pipeline-level entry points.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Stencil(#[from] StencilError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Admm(#[from] AdmmError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Discretization(#[from] DiscretizationError),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
