//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; missing
//! keys take the defaults of [`RunConfig::default`], except that curve
//! scenarios default to 3-point stencils with the arc-length chart, and
//! `circle-ot1d` defaults to balanced transport (`eta = 0`).
//!
//! | key | default | range |
//! |---|---|---|
//! | `scenario` | `sphere` | a known scenario name or `external:<path>` |
//! | `beta` | 1 | > 0 |
//! | `alpha` | 1 | > 0 |
//! | `eta` | 1 | >= 0, 0 means balanced |
//! | `n_t` | 16 | >= 2 |
//! | `target_count` | 400 | >= 8 |
//! | `stencil_size` | 7 | >= 3 |
//! | `poly_degree` | 2 | <= 4 |
//! | `epsilon` | unset | > 0, fixes the shape parameter |
//! | `kappa_target` | 1e10 | > 1 |
//! | `projection` | `along-normal` | `along-normal`, `orthogonal`, `arc-length` |
//! | `include_ties` | true | bool |
//! | `shift` | `minus` | `minus`, `plus` |
//! | `linear_solver` | `direct` | `direct`, `iterative` |
//! | `continuity` | `projection` | `projection`, `spectral` |
//! | `tol` | 1e-4 | (0, 1) |
//! | `max_iters` | 3000 | >= 1 |
//! | `project_tangential` | false | bool |
//! | `snapshot_times` | 0,0.25,0.5,0.75,1 | each in [0, 1] |
//! | `refinements` | 8,16,32,64 | each >= 4 |
//! | `seed` | 1 | u64 |
//! | `total_area` | 1 | > 0 |
//! | `output_dir` | `out` | path |

use std::collections::HashSet;
use std::path::PathBuf;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::admm::{AdmmConfig, ContinuitySolve};
use crate::elliptic::{EllipticOptions, LinearSolver, ShiftConvention};
use crate::geometry::ProjectionMode;
use crate::rbf::{KernelConfig, ShapeMode};
use crate::scenarios::{ScenarioKind, ScenarioOptions};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: cannot parse `{value}` for `{key}`: expected {expected}")]
    Invalid { line: usize, key: String, value: String, expected: String },
    #[error("line {line}: `{key}` out of range: {value} (requires {requirement})")]
    OutOfRange { line: usize, key: String, value: String, requirement: String },
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub scenario: String,
    pub beta: f64,
    pub alpha: f64,
    pub eta: f64,
    pub n_t: usize,
    pub target_count: usize,
    pub stencil_size: usize,
    pub poly_degree: usize,
    pub epsilon: Option<f64>,
    pub kappa_target: f64,
    pub projection: ProjectionMode,
    pub include_ties: bool,
    pub shift: ShiftConvention,
    pub linear_solver: LinearSolver,
    pub continuity: ContinuitySolve,
    pub tol: f64,
    pub max_iters: usize,
    pub project_tangential: bool,
    pub snapshot_times: Vec<f64>,
    pub refinements: Vec<usize>,
    pub seed: u64,
    pub total_area: f64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: "sphere".into(),
            beta: 1.0,
            alpha: 1.0,
            eta: 1.0,
            n_t: 16,
            target_count: 400,
            stencil_size: 7,
            poly_degree: 2,
            epsilon: None,
            kappa_target: 1e10,
            projection: ProjectionMode::AlongNormal,
            include_ties: true,
            shift: ShiftConvention::MinusIdentity,
            linear_solver: LinearSolver::Direct,
            continuity: ContinuitySolve::Projection,
            tol: 1e-4,
            max_iters: 3000,
            project_tangential: false,
            snapshot_times: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            refinements: vec![8, 16, 32, 64],
            seed: 1,
            total_area: 1.0,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn scenario_kind(&self) -> ScenarioKind {
        // validated during parsing; a hand-built config with a bad name falls
        // back to the default surface
        ScenarioKind::parse(&self.scenario).unwrap_or(ScenarioKind::Surface(crate::scenarios::Surface::Sphere))
    }

    pub fn kernel(&self) -> KernelConfig {
        KernelConfig {
            shape: match self.epsilon {
                Some(eps) => ShapeMode::Fixed(eps),
                None => ShapeMode::TargetCondition(self.kappa_target),
            },
            poly_degree: self.poly_degree,
            stencil_size: self.stencil_size,
            projection: self.projection,
            include_ties: self.include_ties,
        }
    }

    pub fn elliptic(&self) -> EllipticOptions {
        EllipticOptions { shift: self.shift, solver: self.linear_solver, ..Default::default() }
    }

    pub fn admm(&self) -> AdmmConfig {
        AdmmConfig {
            tol: self.tol,
            max_iters: self.max_iters,
            project_tangential: self.project_tangential,
            continuity: self.continuity,
        }
    }

    pub fn scenario_options(&self) -> ScenarioOptions {
        ScenarioOptions {
            target_count: self.target_count,
            beta: self.beta,
            seed: self.seed,
            total_area: self.total_area,
            external_densities: None,
        }
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    parse_config_with_scenario(text, "sphere")
}

/// Like [`parse_config`], with a different scenario used when the text does
/// not name one.
pub fn parse_config_with_scenario(text: &str, default_scenario: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig { scenario: default_scenario.to_string(), ..Default::default() };
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError::Malformed { line, text: raw.trim().to_string() });
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Malformed { line, text: raw.trim().to_string() });
        }
        if !seen.insert(key.to_string()) {
            return Err(ConfigError::Duplicate { line, key: key.into() });
        }
        let v = Value { line, key, text: value };
        match key {
            "scenario" => {
                ScenarioKind::parse(value).map_err(|_| v.invalid("a scenario name"))?;
                cfg.scenario = value.to_string();
            }
            "beta" => cfg.beta = v.number(|x| x > 0.0, "> 0")?,
            "alpha" => cfg.alpha = v.number(|x| x > 0.0, "> 0")?,
            "eta" => cfg.eta = v.number(|x| x >= 0.0, ">= 0")?,
            "n_t" => cfg.n_t = v.count(|n| n >= 2, ">= 2")?,
            "target_count" => cfg.target_count = v.count(|n| n >= 8, ">= 8")?,
            "stencil_size" => cfg.stencil_size = v.count(|n| n >= 3, ">= 3")?,
            "poly_degree" => cfg.poly_degree = v.count(|n| n <= 4, "<= 4")?,
            "epsilon" => cfg.epsilon = Some(v.number(|x| x > 0.0, "> 0")?),
            "kappa_target" => cfg.kappa_target = v.number(|x| x > 1.0, "> 1")?,
            "projection" => {
                cfg.projection = match value {
                    "along-normal" => ProjectionMode::AlongNormal,
                    "orthogonal" => ProjectionMode::Orthogonal,
                    "arc-length" => ProjectionMode::ArcLength,
                    _ => return Err(v.invalid("along-normal, orthogonal or arc-length")),
                }
            }
            "include_ties" => cfg.include_ties = v.boolean()?,
            "shift" => {
                cfg.shift = match value {
                    "minus" => ShiftConvention::MinusIdentity,
                    "plus" => ShiftConvention::PlusIdentity,
                    _ => return Err(v.invalid("minus or plus")),
                }
            }
            "linear_solver" => {
                cfg.linear_solver = match value {
                    "direct" => LinearSolver::Direct,
                    "iterative" => LinearSolver::Iterative,
                    _ => return Err(v.invalid("direct or iterative")),
                }
            }
            "continuity" => {
                cfg.continuity = match value {
                    "projection" => ContinuitySolve::Projection,
                    "spectral" => ContinuitySolve::Spectral,
                    _ => return Err(v.invalid("projection or spectral")),
                }
            }
            "tol" => cfg.tol = v.number(|x| x > 0.0 && x < 1.0, "0 < tol < 1")?,
            "max_iters" => cfg.max_iters = v.count(|n| n >= 1, ">= 1")?,
            "project_tangential" => cfg.project_tangential = v.boolean()?,
            "snapshot_times" => cfg.snapshot_times = v.list(|x: f64| (0.0..=1.0).contains(&x), "each in [0, 1]")?,
            "refinements" => cfg.refinements = v.list(|n: usize| n >= 4, "each >= 4")?,
            "seed" => cfg.seed = v.parse("an unsigned integer")?,
            "total_area" => cfg.total_area = v.number(|x| x > 0.0, "> 0")?,
            "output_dir" => cfg.output_dir = PathBuf::from(value),
            _ => return Err(ConfigError::UnknownKey { line, key: key.into() }),
        }
    }
    let kind = cfg.scenario_kind();
    if kind.is_curve() {
        if !seen.contains("stencil_size") {
            cfg.stencil_size = 3;
        }
        if !seen.contains("projection") {
            cfg.projection = ProjectionMode::ArcLength;
        }
    }
    if kind == ScenarioKind::CircleOt1d && !seen.contains("eta") {
        cfg.eta = 0.0;
    }
    Ok(cfg)
}

pub fn read_config_text(path: &std::path::Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })
}

struct Value<'a> {
    line: usize,
    key: &'a str,
    text: &'a str,
}

impl Value<'_> {
    fn invalid(&self, expected: &str) -> ConfigError {
        ConfigError::Invalid {
            line: self.line,
            key: self.key.into(),
            value: self.text.into(),
            expected: expected.into(),
        }
    }

    fn out_of_range(&self, requirement: &str) -> ConfigError {
        ConfigError::OutOfRange {
            line: self.line,
            key: self.key.into(),
            value: self.text.into(),
            requirement: requirement.into(),
        }
    }

    fn parse<T: FromStr>(&self, expected: &str) -> Result<T, ConfigError> {
        self.text.parse().map_err(|_| self.invalid(expected))
    }

    fn number(&self, ok: impl Fn(f64) -> bool, requirement: &str) -> Result<f64, ConfigError> {
        let x: f64 = self.parse("a number")?;
        if x.is_finite() && ok(x) {
            Ok(x)
        } else {
            Err(self.out_of_range(requirement))
        }
    }

    fn count(&self, ok: impl Fn(usize) -> bool, requirement: &str) -> Result<usize, ConfigError> {
        let n: usize = self.parse("a non-negative integer")?;
        if ok(n) {
            Ok(n)
        } else {
            Err(self.out_of_range(requirement))
        }
    }

    fn boolean(&self) -> Result<bool, ConfigError> {
        self.parse("true or false")
    }

    fn list<T: FromStr + Copy>(&self, ok: impl Fn(T) -> bool, requirement: &str) -> Result<Vec<T>, ConfigError> {
        let items = self
            .text
            .split(',')
            .map(|s| s.trim().parse::<T>().map_err(|_| self.invalid("a comma-separated list")))
            .collect::<Result<Vec<T>, _>>()?;
        if items.is_empty() || !items.iter().all(|&x| ok(x)) {
            return Err(self.out_of_range(requirement));
        }
        Ok(items)
    }
}
