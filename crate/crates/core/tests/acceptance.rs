//! Acceptance criteria, one line of output per criterion.
//!
//! Runs as a plain binary so every verdict is printed even when it passes;
//! the process exits non-zero if any criterion fails.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trbf_uot::admm::{self, mass_profile, total_source, RunOutcome, UotProblem};
use trbf_uot::cli::{build_problem, ot1d_table, poisson_table};
use trbf_uot::config::{parse_config, parse_config_with_scenario, RunConfig};
use trbf_uot::discretization::{assemble_laplacian, Field, SpectralBasis, TimeGrid};
use trbf_uot::elliptic::{dense_oracle_solve, EllipticOptions, EllipticSystem};
use trbf_uot::geometry::Vec3;
use trbf_uot::output::observed_order;
use trbf_uot::rbf::{
    audit_stencils, condition_number, kernel_matrix, select_shape_parameter, KernelConfig, StencilSet,
};
use trbf_uot::scenarios::{self, quarter_turn, sample_surface, Surface};

struct Verdict {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

const TWO_NODE_KAPPAS: [f64; 4] = [1e2, 1e4, 1e6, 1e10];

type Criterion = (&'static str, fn() -> Verdict);

fn rel_l2(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).zip(w).map(|((x, y), wi)| wi * (x - y) * (x - y)).sum();
    let den: f64 = b.iter().zip(w).map(|(y, wi)| wi * y * y).sum();
    (num / den).sqrt()
}

fn poisson_convergence() -> Verdict {
    let paper = [2.846e-2, 5.577e-3, 1.253e-3, 2.981e-4];
    let start = Instant::now();
    let cfg = parse_config_with_scenario("refinements = 8, 16, 32, 64", "circle-poisson").expect("config");
    let rows = match poisson_table(&cfg) {
        Ok(r) => r,
        Err(e) => return check(false, format!("error: {e}")),
    };
    let elapsed = start.elapsed();
    let ratios: Vec<f64> = rows.iter().zip(paper).map(|(r, p)| r.l2 / p).collect();
    let orders: Vec<f64> = rows.windows(2).map(|w| observed_order(w[0].l2, w[1].l2, w[0].inv_h, w[1].inv_h)).collect();
    let in_band = ratios.iter().all(|r| (0.5..=2.0).contains(r));
    let ordered = orders.iter().all(|&o| o >= 1.9);
    let l2: Vec<String> = rows.iter().map(|r| format!("{:.3e}", r.l2)).collect();
    check(
        in_band && ordered && elapsed < Duration::from_secs(60),
        format!("l2 {l2:?}, ratio to reference {ratios:.2?}, orders {orders:.3?}, {elapsed:.1?}"),
    )
}

fn ot1d_cost() -> Verdict {
    let paper = [1.41e-2, 1.87e-3, 3.81e-4, 1.57e-4];
    let start = Instant::now();
    let cfg = parse_config_with_scenario("refinements = 8, 16, 32, 64", "circle-ot1d").expect("config");
    let rows = match ot1d_table(&cfg) {
        Ok(r) => r,
        Err(e) => return check(false, format!("error: {e}")),
    };
    let elapsed = start.elapsed();
    let errors: Vec<f64> = rows.iter().map(|r| r.error()).collect();
    let ratios: Vec<f64> = errors.iter().zip(paper).map(|(e, p)| e / p).collect();
    let monotone = errors.windows(2).all(|w| w[1] < w[0]);
    let in_band = ratios.iter().all(|r| (1.0 / 3.0..=3.0).contains(r));
    let converged = rows.iter().all(|r| r.converged);
    let interval = scenarios::ot_1d_interval_cost();
    let interval_err: Vec<String> = rows.iter().map(|r| format!("{:.2e}", (r.cost - interval).abs())).collect();
    let errs: Vec<String> = errors.iter().map(|e| format!("{e:.3e}")).collect();
    check(
        in_band && monotone && converged && elapsed < Duration::from_secs(600),
        format!(
            "oracle {:.6e}, errors {errs:?}, ratio to reference {ratios:.3?}, monotone {monotone}, converged {converged}; \
             against the interval coupling {interval:.6e}: {interval_err:?}; {elapsed:.1?}",
            rows[0].oracle
        ),
    )
}

fn fast_solver_oracle() -> Verdict {
    let start = Instant::now();
    let cloud = sample_surface(Surface::Sphere, 50, 3).expect("cloud");
    let stencils = StencilSet::build(&cloud, &KernelConfig::default()).expect("stencils");
    let laplacian = assemble_laplacian(&stencils);
    let basis = SpectralBasis::new(TimeGrid::new(4).expect("grid"));
    let options = EllipticOptions::default();
    let system = EllipticSystem::build(laplacian.clone(), basis.clone(), options).expect("system");
    let n = cloud.len();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rhs = Field::from_fn(5, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let g0: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let gt: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let fast = system.solve(&rhs, &g0, &gt).expect("fast solve");
        let dense = dense_oracle_solve(&laplacian, &basis, &rhs, &g0, &gt, options.shift).expect("oracle");
        let diff = fast.zip_map(&dense, |a, b| a - b);
        let norm = |f: &Field| f.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(norm(&diff) / norm(&dense));
    }
    let elapsed = start.elapsed();
    check(
        n == 50 && worst <= 1e-8 && elapsed < Duration::from_secs(10),
        format!("N_t = 4, N_n = {n}, 20 seeds, worst relative difference {worst:.2e}, {elapsed:.1?}"),
    )
}

fn stencil_suite() -> Verdict {
    let start = Instant::now();
    let config = KernelConfig::default();
    let kappa = 1e10;
    let mut notes = Vec::new();
    let mut pass = true;
    for surface in Surface::ALL {
        let cloud = match sample_surface(surface, 500, 1) {
            Ok(c) => c,
            Err(e) => return check(false, format!("{}: {e}", surface.name())),
        };
        let stencils = match StencilSet::build(&cloud, &config) {
            Ok(s) => s,
            Err(e) => return check(false, format!("{}: {e}", surface.name())),
        };
        let audit = audit_stencils(&cloud, &stencils);

        // every stencil hits the target condition and its condition number
        // falls as the shape parameter grows
        let mut target_gap: f64 = 0.0;
        let mut monotone = true;
        let mut closed_form = [0.0f64; 4];
        for (j, node) in stencils.nodes.iter().enumerate() {
            target_gap =
                target_gap.max((node.cond_laplacian / kappa).ln().abs()).max((node.cond_divergence / kappa).ln().abs());
            let c = cloud.points()[j];
            let scale = node.neighbors.iter().map(|&k| (cloud.points()[k] - c).norm()).fold(0.0, f64::max);
            let pts: Vec<[f64; 3]> = node
                .neighbors
                .iter()
                .map(|&k| {
                    let y = (cloud.points()[k] - c) / scale;
                    [y.x, y.y, y.z]
                })
                .collect();
            // only where the computed condition number resolves anything:
            // below ~1/eps_mach and visibly above the identity's 1
            let conds: Vec<f64> =
                (0..40).map(|step| condition_number(&kernel_matrix(&pts, 0.2 * 1.2f64.powi(step)))).collect();
            for w in conds.windows(2) {
                let resolved = |c: f64| c > 1.0 + 1e-9 && c < 1e13;
                if resolved(w[0]) && resolved(w[1]) && w[1] >= w[0] {
                    monotone = false;
                }
            }

            // two-node stencil built from the center and its nearest neighbor
            let nearest = cloud.points()[node.neighbors[1]];
            let d = (nearest - c).norm();
            let pair = [[c.x, c.y, c.z], [nearest.x, nearest.y, nearest.z]];
            for (target, gap) in TWO_NODE_KAPPAS.iter().zip(closed_form.iter_mut()) {
                let exact = (-((target - 1.0) / (target + 1.0)).ln()).sqrt() / d;
                *gap = match select_shape_parameter(&pair, *target) {
                    Ok(eps) => gap.max((eps - exact).abs() / exact),
                    Err(_) => f64::INFINITY,
                };
            }
        }
        // at kappa = 1e10 the stored entry exp(-(eps d)^2) alone carries a
        // relative error ~1e-16 * kappa in 1 - phi, so the closed form is
        // asserted where double precision can represent it and reported at
        // the default target
        let ok =
            audit.max_defect() <= 1e-8 && target_gap <= 1e-6 && monotone && closed_form[..3].iter().all(|&g| g <= 1e-8);
        pass &= ok;
        notes.push(format!(
            "{} n={} poly {:.1e} row {:.1e} log-kappa gap {:.1e} monotone {} two-node {:.1e} (kappa 1e10: {:.1e})",
            surface.name(),
            cloud.len(),
            audit.laplacian_poly.max(audit.divergence_poly),
            audit.laplacian_row_sum.max(audit.divergence_row_sum),
            target_gap,
            monotone,
            closed_form[..3].iter().fold(0.0f64, |a, &b| a.max(b)),
            closed_form[3]
        ));
    }
    let elapsed = start.elapsed();
    check(pass && elapsed < Duration::from_secs(60), format!("{}; {elapsed:.1?}", notes.join("; ")))
}

fn run_scenario(text: &str) -> Result<(UotProblem, RunOutcome, Duration), String> {
    let start = Instant::now();
    let cfg: RunConfig = parse_config(text).map_err(|e| e.to_string())?;
    let problem = build_problem(&cfg).map_err(|e| e.to_string())?;
    let outcome = admm::run(&problem, &cfg.admm()).map_err(|e| e.to_string())?;
    Ok((problem, outcome, start.elapsed()))
}

fn admm_invariants() -> Verdict {
    let (problem, out, elapsed) = match run_scenario("scenario = sphere\nbeta = 1") {
        Ok(r) => r,
        Err(e) => return check(false, format!("error: {e}")),
    };
    let min_rho = out.reports.iter().map(|r| r.min_rho).fold(f64::INFINITY, f64::min);
    let continuity = out.reports.iter().map(|r| r.continuity).fold(0.0, f64::max);
    let quintic = out.reports.iter().map(|r| r.quintic).fold(0.0, f64::max);
    let pass = min_rho >= 0.0
        && continuity <= 1e-6
        && quintic <= 1e-12
        && out.converged
        && out.reports.len() <= 3000
        && elapsed < Duration::from_secs(900);
    check(
        pass,
        format!(
            "N_n = {}, {} iterations, converged {}, min rho {min_rho:.2e}, max continuity {continuity:.1e}, \
             max quintic {quintic:.1e}, cost {:.6e}, {elapsed:.1?}",
            problem.cloud.len(),
            out.reports.len(),
            out.converged,
            out.reports.last().map_or(f64::NAN, |r| r.wfr)
        ),
    )
}

fn mass_gain() -> Verdict {
    let (problem, out, elapsed) = match run_scenario("scenario = sphere\nbeta = 1.5") {
        Ok(r) => r,
        Err(e) => return check(false, format!("error: {e}")),
    };
    let source = total_source(&out.state, &problem);
    let w = problem.cloud.weights();
    let l2 =
        |a: &[f64], b: &[f64]| a.iter().zip(b).zip(w).map(|((x, y), wi)| wi * (x - y) * (x - y)).sum::<f64>().sqrt();
    let last = out.state.rho_bar.n_times() - 1;
    let start_gap = l2(out.state.rho_bar.row(0), &problem.rho0);
    let end_gap = l2(out.state.rho_bar.row(last), &problem.rho_t);
    let primal_gap = l2(out.state.rho.row(0), &problem.rho0).max(l2(out.state.rho.row(last), &problem.rho_t));
    let mass = mass_profile(&out.state, &problem);
    let pass = (source - 0.5).abs() <= 0.05
        && start_gap <= 1e-4
        && end_gap <= 1e-4
        && out.converged
        && elapsed < Duration::from_secs(900);
    check(
        pass,
        format!(
            "total source {source:.6}, boundary gaps {start_gap:.1e} / {end_gap:.1e} (step-1 density {primal_gap:.1e}), \
             mass {:.6} -> {:.6}, {} iterations, converged {}, {elapsed:.1?}",
            mass[0],
            mass[last],
            out.reports.len(),
            out.converged
        ),
    )
}

fn symmetry() -> Verdict {
    let (problem, out, elapsed) = match run_scenario("scenario = sphere-s1") {
        Ok(r) => r,
        Err(e) => return check(false, format!("error: {e}")),
    };
    let pts = problem.cloud.points();
    let mid = out.state.rho_bar.row(problem.grid().nearest_index(0.5));
    let mut miss: f64 = 0.0;
    let rotated: Vec<f64> = pts
        .iter()
        .map(|p| {
            let r: Vec3 = quarter_turn(p);
            let (k, d) = pts
                .iter()
                .map(|q| (q - r).norm())
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("non-empty cloud");
            miss = miss.max(d);
            mid[k]
        })
        .collect();
    let err = rel_l2(&rotated, mid, problem.cloud.weights());
    check(
        err <= 0.05 && miss < 1e-12 && out.converged,
        format!(
            "quarter-turn relative L2 {err:.2e}, node match {miss:.0e}, {} iterations, converged {}, {elapsed:.1?}",
            out.reports.len(),
            out.converged
        ),
    )
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("1 poisson convergence", poisson_convergence),
        ("2 1d transport cost", ot1d_cost),
        ("3 fast solver vs dense oracle", fast_solver_oracle),
        ("4 stencil property suite", stencil_suite),
        ("5 admm invariants, sphere", admm_invariants),
        ("6 mass gain identity", mass_gain),
        ("7 symmetry preservation", symmetry),
    ];
    let mut failed = 0;
    let mut stdout = std::io::stdout();
    for (name, run) in criteria {
        let v = run();
        if !v.pass {
            failed += 1;
        }
        let _ = writeln!(stdout, "criterion {name}: {} ({})", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        let _ = stdout.flush();
    }
    let _ = writeln!(stdout, "acceptance: {} of 7 criteria passed", 7 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
