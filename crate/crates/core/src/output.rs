//! Run artifacts: trajectory snapshots, iteration log, manifest and
//! refinement tables.
//!
//! Floats are written with 17 significant digits in scientific notation, which
//! round-trips every `f64` and keeps files byte-identical across runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::admm::{AdmmState, IterationReport};
use crate::discretization::TimeGrid;
use crate::geometry::PointCloud;

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot serialize {what}: {source}")]
    Json { what: &'static str, source: serde_json::Error },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io { path: path.to_path_buf(), source }
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_file(path: &Path, text: &str) -> Result<(), OutputError> {
    fs::write(path, text).map_err(io(path))
}

pub fn ensure_dir(dir: &Path) -> Result<(), OutputError> {
    fs::create_dir_all(dir).map_err(io(dir))
}

/// Grid indices for the requested times, snapped to the nearest node, sorted
/// and deduplicated.
pub fn snapshot_indices(times: &[f64], grid: &TimeGrid) -> Vec<usize> {
    let mut idx: Vec<usize> = times.iter().map(|&t| grid.nearest_index(t)).collect();
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// CSV of the feasible (projected) variables at time index `i`.
pub fn snapshot_csv(state: &AdmmState, cloud: &PointCloud, i: usize) -> String {
    let mut out = String::from("x,y,z,rho,f,mx,my,mz\n");
    for (j, x) in cloud.points().iter().enumerate() {
        let cols = [
            x.x,
            x.y,
            x.z,
            state.rho_bar.get(i, j),
            state.f_bar.get(i, j),
            state.m_bar[0].get(i, j),
            state.m_bar[1].get(i, j),
            state.m_bar[2].get(i, j),
        ];
        let line: Vec<String> = cols.iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Writes `snapshot_t{index}.csv` for each requested time and returns the
/// paths in index order.
pub fn write_snapshots(
    state: &AdmmState,
    cloud: &PointCloud,
    grid: &TimeGrid,
    times: &[f64],
    dir: &Path,
) -> Result<Vec<PathBuf>, OutputError> {
    ensure_dir(dir)?;
    snapshot_indices(times, grid)
        .into_iter()
        .map(|i| {
            let path = dir.join(format!("snapshot_t{i}.csv"));
            write_file(&path, &snapshot_csv(state, cloud, i))?;
            Ok(path)
        })
        .collect()
}

#[derive(Serialize)]
struct CostLine {
    iter: usize,
    primal: f64,
    dual: f64,
    continuity: f64,
    wfr: f64,
}

pub fn cost_line(report: &IterationReport) -> String {
    let line = CostLine {
        iter: report.iter,
        primal: report.primal,
        dual: report.dual,
        continuity: report.continuity,
        wfr: report.wfr,
    };
    // plain numeric struct; serialization cannot fail
    serde_json::to_string(&line).unwrap_or_default()
}

pub fn write_cost_log(reports: &[IterationReport], path: &Path) -> Result<(), OutputError> {
    let mut text = String::new();
    for r in reports {
        text.push_str(&cost_line(r));
        text.push('\n');
    }
    write_file(path, &text)
}

pub fn write_manifest<T: Serialize>(manifest: &T, path: &Path) -> Result<(), OutputError> {
    let mut text =
        serde_json::to_string_pretty(manifest).map_err(|source| OutputError::Json { what: "manifest", source })?;
    text.push('\n');
    write_file(path, &text)
}

/// Observed order between consecutive refinements.
pub fn observed_order(coarse: f64, fine: f64, n_coarse: usize, n_fine: usize) -> f64 {
    (coarse / fine).ln() / (n_fine as f64 / n_coarse as f64).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PoissonRow {
    pub inv_dt: usize,
    pub inv_h: usize,
    pub l1: f64,
    pub l2: f64,
}

pub fn poisson_table_csv(rows: &[PoissonRow]) -> String {
    let mut out = String::from("inv_dt,inv_h,l1,l1_order,l2,l2_order\n");
    for (k, r) in rows.iter().enumerate() {
        let (o1, o2) = match k.checked_sub(1).map(|p| &rows[p]) {
            Some(p) => (
                fmt_f64(observed_order(p.l1, r.l1, p.inv_h, r.inv_h)),
                fmt_f64(observed_order(p.l2, r.l2, p.inv_h, r.inv_h)),
            ),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(out, "{},{},{},{o1},{},{o2}", r.inv_dt, r.inv_h, fmt_f64(r.l1), fmt_f64(r.l2));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ot1dRow {
    pub inv_dt: usize,
    pub inv_h: usize,
    pub cost: f64,
    pub oracle: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl Ot1dRow {
    pub fn error(&self) -> f64 {
        (self.cost - self.oracle).abs()
    }
}

pub fn ot1d_table_csv(rows: &[Ot1dRow]) -> String {
    let mut out = String::from("inv_dt,inv_h,cost,oracle,error,order,iterations,converged\n");
    for (k, r) in rows.iter().enumerate() {
        let order = match k.checked_sub(1).map(|p| &rows[p]) {
            Some(p) => fmt_f64(observed_order(p.error(), r.error(), p.inv_h, r.inv_h)),
            None => String::new(),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{order},{},{}",
            r.inv_dt,
            r.inv_h,
            fmt_f64(r.cost),
            fmt_f64(r.oracle),
            fmt_f64(r.error()),
            r.iterations,
            r.converged
        );
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<(), OutputError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_file(path, text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapping_on_sixteen_intervals() {
        let grid = TimeGrid::new(16).unwrap();
        assert_eq!(snapshot_indices(&[0.0, 0.25, 0.5, 0.75, 1.0], &grid), vec![0, 4, 8, 12, 16]);
        assert_eq!(snapshot_indices(&[0.49, 0.51, 0.03], &grid), vec![0, 8]);
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, 0.0] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
        assert_eq!(fmt_f64(0.5), "5.0000000000000000e-1");
    }

    #[test]
    fn poisson_table_orders() {
        let rows = [
            PoissonRow { inv_dt: 8, inv_h: 8, l1: 4e-2, l2: 8e-2 },
            PoissonRow { inv_dt: 16, inv_h: 16, l1: 1e-2, l2: 2e-2 },
        ];
        let csv = poisson_table_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "inv_dt,inv_h,l1,l1_order,l2,l2_order");
        let first: Vec<&str> = lines[1].split(',').collect();
        assert_eq!((first[3], first[5]), ("", ""));
        let cols: Vec<&str> = lines[2].split(',').collect();
        assert_eq!(cols[3].parse::<f64>().unwrap(), 2.0);
        assert_eq!(cols[5].parse::<f64>().unwrap(), 2.0);
    }

    #[test]
    fn cost_line_schema() {
        let r = IterationReport {
            iter: 3,
            primal: 0.5,
            dual: 0.25,
            continuity: 1e-15,
            wfr: 0.125,
            infeasible: 0,
            quintic: 0.0,
            min_rho: 0.0,
        };
        assert_eq!(cost_line(&r), r#"{"iter":3,"primal":0.5,"dual":0.25,"continuity":1e-15,"wfr":0.125}"#);
    }

    #[test]
    fn unwritable_directory_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        let blocker = tmp.path().join("file");
        fs::write(&blocker, "x").unwrap();
        assert!(matches!(ensure_dir(&blocker.join("sub")), Err(OutputError::Io { .. })));
    }
}
