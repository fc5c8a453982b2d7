use proptest::prelude::*;

use trbf_uot::config::{parse_config, ConfigError};
use trbf_uot::discretization::{assemble_laplacian, TimeGrid};
use trbf_uot::output::snapshot_indices;
use trbf_uot::rbf::{KernelConfig, StencilSet};
use trbf_uot::scenarios::{build_transport_scenario, sample_surface, ScenarioKind, ScenarioOptions, Surface};
use trbf_uot::{EllipticOptions, UotProblem};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn positive_beta_round_trips(beta in 1e-6f64..1e6) {
        let cfg = parse_config(&format!("beta = {beta}")).unwrap();
        prop_assert_eq!(cfg.beta, beta);
    }

    #[test]
    fn nonpositive_beta_is_rejected(beta in -1e6f64..=0.0) {
        let is_range_error = matches!(parse_config(&format!("beta = {beta}")), Err(ConfigError::OutOfRange { .. }));
        prop_assert!(is_range_error);
    }

    #[test]
    fn snapshots_land_on_grid(n in 2usize..64, times in prop::collection::vec(0.0f64..=1.0, 1..8)) {
        let grid = TimeGrid::new(n).unwrap();
        let idx = snapshot_indices(&times, &grid);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        for t in times {
            let i = grid.nearest_index(t);
            prop_assert!(idx.contains(&i));
            prop_assert!((grid.time(i) - t).abs() <= 0.5 * grid.dt() + 1e-15);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn laplacian_rows_sum_to_zero(seed in 0u64..1000, surface in 0usize..5) {
        let cloud = sample_surface(Surface::ALL[surface], 120, seed).unwrap();
        let st = StencilSet::build(&cloud, &KernelConfig::default()).unwrap();
        let ones = vec![1.0; cloud.len()];
        let l = assemble_laplacian(&st);
        let scale = l.matrix.triplets().map(|(_, _, v)| v.abs()).fold(0.0, f64::max);
        for v in l.matrix.matvec(&ones) {
            prop_assert!(v.abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn conservative_divergence_preserves_mass(seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let sc = build_transport_scenario(&ScenarioKind::Surface(Surface::Sphere), &ScenarioOptions { target_count: 100, ..Default::default() }).unwrap();
        let problem = UotProblem::new(sc.cloud, sc.rho0, sc.rho1, &KernelConfig::default(), 4, 1.0, 1.0, EllipticOptions::default()).unwrap();
        let n = problem.cloud.len();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let div = problem.divergence.divergence([&m[0], &m[1], &m[2]]);
        let total: f64 = div.iter().zip(problem.cloud.weights()).map(|(d, w)| d * w).sum();
        let size: f64 = div.iter().zip(problem.cloud.weights()).map(|(d, w)| (d * w).abs()).sum();
        prop_assert!(total.abs() <= 1e-12 * size.max(1.0));
    }
}
