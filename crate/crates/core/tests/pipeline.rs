use std::fs;

use trbf_uot::cli::solve;
use trbf_uot::config::parse_config;

const SMALL: &str = "scenario = sphere\ntarget_count = 100\nn_t = 8\n";

#[test]
fn solve_writes_artifacts_and_pins_boundary_slices() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(SMALL).unwrap();
    let out = solve(&cfg, dir.path(), |_| {}).unwrap();
    assert!(out.outcome.converged);

    let names: Vec<String> =
        out.snapshots.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["snapshot_t0.csv", "snapshot_t2.csv", "snapshot_t4.csv", "snapshot_t6.csv", "snapshot_t8.csv"]);

    let first = fs::read_to_string(&out.snapshots[0]).unwrap();
    let mut lines = first.lines();
    assert_eq!(lines.next(), Some("x,y,z,rho,f,mx,my,mz"));
    let rho: Vec<f64> = lines.map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert_eq!(rho.len(), out.problem.cloud.len());
    for (a, b) in rho.iter().zip(&out.problem.rho0) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    let log = fs::read_to_string(dir.path().join("cost.jsonl")).unwrap();
    assert_eq!(log.lines().count(), out.outcome.reports.len());
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    for key in ["iter", "primal", "dual", "continuity", "wfr"] {
        assert!(last.get(key).is_some(), "{key}");
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["target_count"], 100);
    assert_eq!(manifest["converged"], true);
}

#[test]
fn identical_configs_give_identical_bytes() {
    let cfg = parse_config(SMALL).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    solve(&cfg, a.path(), |_| {}).unwrap();
    solve(&cfg, b.path(), |_| {}).unwrap();
    for name in ["snapshot_t0.csv", "snapshot_t4.csv", "snapshot_t8.csv", "cost.jsonl"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn iteration_cap_keeps_partial_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&format!("{SMALL}max_iters = 1\n")).unwrap();
    let out = solve(&cfg, dir.path(), |_| {}).unwrap();
    assert!(!out.outcome.converged);
    assert_eq!(out.outcome.reports.len(), 1);
    assert_eq!(out.snapshots.len(), 5);
    assert!(dir.path().join("manifest.json").exists());
}
