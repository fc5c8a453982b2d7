//! Run orchestration and the command-line driver.
//!
//! Exit statuses: 0 success, 1 non-convergence (artifacts are still written),
//! 2 configuration or usage error, 3 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::admm::{self, IterationReport, RunOutcome, UotProblem};
use crate::config::{parse_config_with_scenario, read_config_text, ConfigError, RunConfig};
use crate::discretization::{assemble_laplacian, SpectralBasis};
use crate::elliptic::EllipticSystem;
use crate::output::{self, Ot1dRow, PoissonRow};
use crate::rbf::{audit_stencils, StencilAudit, StencilSet};
use crate::scenarios::{self, build_transport_scenario, ScenarioKind, ScenarioOptions};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_NOT_CONVERGED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub fn build_problem(cfg: &RunConfig) -> Result<UotProblem, Error> {
    let scenario = build_transport_scenario(&cfg.scenario_kind(), &cfg.scenario_options())?;
    Ok(UotProblem::new(
        scenario.cloud,
        scenario.rho0,
        scenario.rho1,
        &cfg.kernel(),
        cfg.n_t,
        cfg.alpha,
        cfg.eta,
        cfg.elliptic(),
    )?)
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveManifest {
    pub config: RunConfig,
    pub nodes: usize,
    pub time_intervals: usize,
    pub snapshot_indices: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub last: Option<IterationReport>,
}

#[derive(Debug)]
pub struct SolveOutput {
    pub problem: UotProblem,
    pub outcome: RunOutcome,
    pub snapshots: Vec<PathBuf>,
}

/// Full ADMM run plus artifacts in `dir`: snapshots, `cost.jsonl` and
/// `manifest.json`.
pub fn solve(cfg: &RunConfig, dir: &Path, observe: impl FnMut(&IterationReport)) -> Result<SolveOutput, Error> {
    let problem = build_problem(cfg)?;
    let outcome = admm::run_with(&problem, &cfg.admm(), observe)?;
    let grid = *problem.grid();
    let snapshots = output::write_snapshots(&outcome.state, &problem.cloud, &grid, &cfg.snapshot_times, dir)?;
    output::write_cost_log(&outcome.reports, &dir.join("cost.jsonl"))?;
    let manifest = SolveManifest {
        config: RunConfig { output_dir: dir.to_path_buf(), ..cfg.clone() },
        nodes: problem.cloud.len(),
        time_intervals: grid.intervals(),
        snapshot_indices: output::snapshot_indices(&cfg.snapshot_times, &grid),
        iterations: outcome.reports.len(),
        converged: outcome.converged,
        last: outcome.reports.last().copied(),
    };
    output::write_manifest(&manifest, &dir.join("manifest.json"))?;
    Ok(SolveOutput { problem, outcome, snapshots })
}

/// Space-time Poisson refinement on the circle with `1/dt = 1/h = n`.
/// Errors are trapezoid-in-time, node-weight-in-space discrete norms.
pub fn poisson_table(cfg: &RunConfig) -> Result<Vec<PoissonRow>, Error> {
    let kernel = cfg.kernel();
    cfg.refinements
        .iter()
        .map(|&n| {
            let case = scenarios::poisson_1d_case(n)?;
            let stencils = StencilSet::build(&case.cloud, &kernel)?;
            let system =
                EllipticSystem::build(assemble_laplacian(&stencils), SpectralBasis::new(case.grid), cfg.elliptic())?;
            let u = system.solve(&case.rhs, &case.g0, &case.gt)?;
            let tw = case.grid.trapezoid_weights();
            let w = case.cloud.weights();
            let (mut l1, mut l2) = (0.0, 0.0);
            for (i, twi) in tw.iter().enumerate() {
                for (j, wj) in w.iter().enumerate() {
                    let e = (u.get(i, j) - case.exact.get(i, j)).abs();
                    l1 += twi * wj * e;
                    l2 += twi * wj * e * e;
                }
            }
            Ok(PoissonRow { inv_dt: n, inv_h: n, l1, l2: l2.sqrt() })
        })
        .collect()
}

/// Transport cost on the circle at `1/dt = 1/h = n` against the exact circle
/// cost.
pub fn ot1d_table(cfg: &RunConfig) -> Result<Vec<Ot1dRow>, Error> {
    let oracle = scenarios::ot_1d_exact_cost();
    cfg.refinements
        .iter()
        .map(|&n| {
            let opts = ScenarioOptions { target_count: n, ..cfg.scenario_options() };
            let sc = build_transport_scenario(&ScenarioKind::CircleOt1d, &opts)?;
            let problem =
                UotProblem::new(sc.cloud, sc.rho0, sc.rho1, &cfg.kernel(), n, cfg.alpha, cfg.eta, cfg.elliptic())?;
            let out = admm::run(&problem, &cfg.admm())?;
            let cost = out.reports.last().map_or(f64::NAN, |r| r.wfr);
            Ok(Ot1dRow { inv_dt: n, inv_h: n, cost, oracle, iterations: out.reports.len(), converged: out.converged })
        })
        .collect()
}

pub fn stencil_audit(cfg: &RunConfig) -> Result<StencilAudit, Error> {
    let cloud = match cfg.scenario_kind() {
        ScenarioKind::CirclePoisson => scenarios::circle_cloud(cfg.target_count)?,
        kind => build_transport_scenario(&kind, &cfg.scenario_options())?.cloud,
    };
    let stencils = StencilSet::build(&cloud, &cfg.kernel())?;
    Ok(audit_stencils(&cloud, &stencils))
}

#[derive(Debug, Parser)]
#[command(name = "trbf-uot", version, about = "Meshless (un)balanced optimal transport on point-cloud surfaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run ADMM and write snapshots, cost.jsonl and manifest.json.
    Solve {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Poisson refinement table as CSV.
    PoissonTable {
        config: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// 1D transport cost refinement table as CSV.
    Ot1dTable {
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Polynomial-exactness and row-sum report for the scenario's stencils.
    StencilAudit { config: PathBuf },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<output::OutputError> for Failure {
    fn from(e: output::OutputError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load(path: &Path, default_scenario: &str) -> Result<RunConfig, Failure> {
    Ok(parse_config_with_scenario(&read_config_text(path)?, default_scenario)?)
}

fn require_curve(cfg: &RunConfig, expected: &str) -> Result<(), Failure> {
    if cfg.scenario == expected {
        Ok(())
    } else {
        Err(Failure::Config(format!("this table runs on scenario `{expected}`, config names `{}`", cfg.scenario)))
    }
}

fn emit(text: &str, path: Option<&Path>) -> Result<(), Failure> {
    match path {
        Some(p) => Ok(output::write_text(p, text)?),
        None => write_stdout(text),
    }
}

fn write_stdout(text: &str) -> Result<(), Failure> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::Runtime(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn dispatch(cli: Cli) -> Result<i32, Failure> {
    match cli.command {
        Command::Solve { config, output_dir, quiet } => {
            let cfg = load(&config, "sphere")?;
            let dir = output_dir.unwrap_or_else(|| cfg.output_dir.clone());
            let out = solve(&cfg, &dir, |r| {
                if !quiet && (r.iter == 1 || r.iter % 100 == 0) {
                    eprintln!(
                        "iter {:>5}  primal {:.3e}  dual {:.3e}  continuity {:.2e}  cost {:.6e}",
                        r.iter, r.primal, r.dual, r.continuity, r.wfr
                    );
                }
            })?;
            let n = out.outcome.reports.len();
            if out.outcome.converged {
                eprintln!("converged after {n} iterations; artifacts in {}", dir.display());
                Ok(EXIT_OK)
            } else {
                eprintln!("not converged after {n} iterations; artifacts in {}", dir.display());
                Ok(EXIT_NOT_CONVERGED)
            }
        }
        Command::PoissonTable { config, output } => {
            let cfg = load(&config, "circle-poisson")?;
            require_curve(&cfg, "circle-poisson")?;
            emit(&output::poisson_table_csv(&poisson_table(&cfg)?), output.as_deref())?;
            Ok(EXIT_OK)
        }
        Command::Ot1dTable { config, output } => {
            let cfg = load(&config, "circle-ot1d")?;
            require_curve(&cfg, "circle-ot1d")?;
            let rows = ot1d_table(&cfg)?;
            emit(&output::ot1d_table_csv(&rows), output.as_deref())?;
            Ok(if rows.iter().all(|r| r.converged) { EXIT_OK } else { EXIT_NOT_CONVERGED })
        }
        Command::StencilAudit { config } => {
            let cfg = load(&config, "sphere")?;
            let audit = stencil_audit(&cfg)?;
            let text = serde_json::to_string_pretty(&audit).map_err(|e| Failure::Runtime(e.to_string()))?;
            write_stdout(&(text + "\n"))?;
            Ok(EXIT_OK)
        }
    }
}

pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            EXIT_CONFIG
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_map_to_config_status() {
        assert_eq!(run_command(["trbf-uot", "frobnicate"]), EXIT_CONFIG);
        assert_eq!(run_command(["trbf-uot", "solve"]), EXIT_CONFIG);
        assert_eq!(run_command(["trbf-uot", "solve", "/nonexistent/run.cfg"]), EXIT_CONFIG);
    }

    #[test]
    fn tables_require_their_scenario() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "scenario = sphere\n").unwrap();
        assert_eq!(run_command(["trbf-uot".as_ref(), "poisson-table".as_ref(), path.as_os_str()]), EXIT_CONFIG);
    }
}
