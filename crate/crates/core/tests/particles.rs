use bumpkit::particles::{
    balance_residual, distances, energy_logsum, nearest_sets, relax, square_lattice,
    triangular_lattice, verify_theorem, Configuration, ParticleError, RelaxOptions, RelaxStatus,
    DEFAULT_NEAREST_TOL,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn indices(sets: &[Vec<bumpkit::particles::NeighborRef>]) -> Vec<Vec<usize>> {
    sets.iter()
        .map(|s| s.iter().map(|r| r.index).collect())
        .collect()
}

fn free_1d(xs: &[f64]) -> Configuration {
    Configuration::free(1, xs.iter().map(|&x| vec![x]).collect()).unwrap()
}

#[test]
fn distances_on_equispaced_ring() {
    let report = distances(&Configuration::ring(30.0, &[0.0, 10.0, 20.0]).unwrap()).unwrap();
    assert_eq!(report.d_alpha, vec![10.0; 3]);
    assert_eq!(report.d_min, 10.0);
    assert_eq!(report.c0_measured, 1.0);
}

#[test]
fn distances_in_free_space() {
    let report = distances(&free_1d(&[0.0, 1.0, 5.0])).unwrap();
    assert_eq!(report.d_alpha, vec![1.0, 1.0, 4.0]);
    assert_eq!(report.d_min, 1.0);
    assert_eq!(report.c0_measured, 4.0);
}

#[test]
fn degenerate_configurations_are_rejected() {
    let cfg = Configuration {
        n: 1,
        geometry: bumpkit::particles::Geometry::FreeSpace,
        points: vec![vec![1.0], vec![1.0]],
    };
    assert!(matches!(
        distances(&cfg),
        Err(ParticleError::DegenerateConfig(0, 1))
    ));
    let cfg = Configuration {
        n: 1,
        geometry: bumpkit::particles::Geometry::Torus {
            periods: vec![10.0],
        },
        points: vec![vec![0.0], vec![10.0]],
    };
    assert!(distances(&cfg).is_err());
}

#[test]
fn nearest_sets_examples() {
    let sets = nearest_sets(&free_1d(&[0.0, 1.0, 5.0]), DEFAULT_NEAREST_TOL).unwrap();
    assert_eq!(indices(&sets), vec![vec![1], vec![0], vec![1]]);

    let ring = Configuration::ring(40.0, &[0.0, 10.0, 20.0, 30.0]).unwrap();
    let sets = nearest_sets(&ring, DEFAULT_NEAREST_TOL).unwrap();
    assert!(sets.iter().all(|s| s.len() == 2));

    let sets = nearest_sets(&square_lattice(4, 10.0), DEFAULT_NEAREST_TOL).unwrap();
    assert!(sets.iter().all(|s| s.len() == 4));
}

#[test]
fn symmetric_configurations_are_balanced() {
    let ring = Configuration::ring(50.0, &[0.0, 10.0, 20.0, 30.0, 40.0]).unwrap();
    assert!(balance_residual(&ring, 1).unwrap().max_residual() < 1e-15);
    assert!(
        balance_residual(&square_lattice(4, 10.0), 2)
            .unwrap()
            .max_residual()
            < 1e-12
    );
    assert!(verify_theorem(&ring, 1e-12).unwrap().all_pass());
    assert!(verify_theorem(&triangular_lattice(4, 4, 9.0), 1e-10)
        .unwrap()
        .all_pass());
}

#[test]
fn free_chain_endpoints_point_inward() {
    let d = 8.0;
    let report = balance_residual(&free_1d(&[0.0, d, 2.0 * d]), 1).unwrap();
    assert!(report.residual_norms[1] < 1e-15);
    // Both partners of an endpoint lie on the same side.
    let expected = 1.0;
    assert!((report.residuals[0][0] - expected).abs() < 1e-12);
    assert!((report.residuals[2][0] + expected).abs() < 1e-12);
    for row in &report.weights {
        let total: f64 = row.iter().map(|w| w.weight).sum();
        assert!((total - 1.0).abs() < 1e-15);
        assert!(row.iter().all(|w| w.weight >= 0.0));
    }
}

#[test]
fn perturbed_lattice_fails_near_the_moved_point() {
    let mut cfg = Configuration::ring(60.0, &[0.0, 10.0, 20.0, 30.0, 40.0, 50.0]).unwrap();
    cfg.points[2][0] += 0.1;
    let check = verify_theorem(&cfg, 1e-3).unwrap();
    // Oracle: the moved point's two partners sit at 9.9 and 10.1.
    let oracle = (0.2f64.exp() - 1.0) / (0.2f64.exp() + 1.0);
    assert!(
        (check.residual_norms[2] - oracle).abs() < 1e-6,
        "{}",
        check.residual_norms[2]
    );
    assert!(!check.passes[1] && !check.passes[2] && !check.passes[3]);
    assert!(check.passes[0] || check.residual_norms[0] < check.residual_norms[1]);
}

#[test]
fn relax_equispaces_random_ring() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut xs: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..80.0)).collect();
    xs.sort_by(f64::total_cmp);
    let cfg = Configuration::ring(80.0, &xs).unwrap();
    let out = relax(&cfg, &RelaxOptions::default()).unwrap();
    assert_eq!(out.status, RelaxStatus::Converged);
    assert!(balance_residual(&out.config, 1).unwrap().max_residual() < 1e-10);
    let report = distances(&out.config).unwrap();
    let mean = report.d_alpha.iter().sum::<f64>() / 8.0;
    let var = report
        .d_alpha
        .iter()
        .map(|d| (d - mean).powi(2))
        .sum::<f64>()
        / 8.0;
    assert!(var.sqrt() / mean < 1e-6);
    assert!(out
        .trace
        .windows(2)
        .all(|w| w[1].energy_logsum <= w[0].energy_logsum + 1e-12));
}

#[test]
fn relax_leaves_balanced_input_unchanged() {
    let cfg = Configuration::ring(30.0, &[0.0, 10.0, 20.0]).unwrap();
    let out = relax(&cfg, &RelaxOptions::default()).unwrap();
    assert_eq!(out.status, RelaxStatus::Converged);
    assert_eq!(out.iterations, 0);
    assert_eq!(out.config, cfg);
}

#[test]
fn two_free_points_drift_apart() {
    let cfg = free_1d(&[0.0, 3.0]);
    let opts = RelaxOptions {
        max_iters: 200,
        ..RelaxOptions::default()
    };
    let out = relax(&cfg, &opts).unwrap();
    assert_ne!(out.status, RelaxStatus::Converged);
    let gap = (out.config.points[1][0] - out.config.points[0][0]).abs();
    assert!(gap > 3.0);
    assert!(out
        .trace
        .windows(2)
        .all(|w| w[1].energy_logsum <= w[0].energy_logsum));
    assert!(matches!(
        relax(&cfg, &RelaxOptions { step: 0.0, ..opts }),
        Err(ParticleError::InvalidStep(_))
    ));
}

#[test]
fn energy_matches_direct_sum() {
    let cfg = free_1d(&[0.0, 4.0, 9.0]);
    let direct = (-4.0f64).exp() + (-5.0f64).exp() + (-9.0f64).exp();
    let e = energy_logsum(&cfg, 1).unwrap();
    assert!((e - direct.ln()).abs() < 1e-12, "{e} vs {}", direct.ln());
}

fn planar_points() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-20.0f64..20.0, 2), 3..7).prop_filter(
        "distinct",
        |pts| {
            pts.iter().enumerate().all(|(i, a)| {
                pts[i + 1..]
                    .iter()
                    .all(|b| (a[0] - b[0]).hypot(a[1] - b[1]) > 0.5)
            })
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn translation_leaves_residuals_unchanged(pts in planar_points(), t in prop::array::uniform2(-50.0f64..50.0)) {
        let a = balance_residual(&Configuration::free(2, pts.clone()).unwrap(), 2).unwrap();
        let moved = pts.iter().map(|p| vec![p[0] + t[0], p[1] + t[1]]).collect();
        let b = balance_residual(&Configuration::free(2, moved).unwrap(), 2).unwrap();
        for (ra, rb) in a.residuals.iter().zip(&b.residuals) {
            prop_assert!((ra[0] - rb[0]).abs() < 1e-9 && (ra[1] - rb[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_rotates_residuals(pts in planar_points(), angle in 0.0f64..6.3) {
        let (s, c) = angle.sin_cos();
        let rot = |v: &[f64]| vec![c * v[0] - s * v[1], s * v[0] + c * v[1]];
        let a = balance_residual(&Configuration::free(2, pts.clone()).unwrap(), 2).unwrap();
        let turned = pts.iter().map(|p| rot(p)).collect();
        let b = balance_residual(&Configuration::free(2, turned).unwrap(), 2).unwrap();
        for (ra, rb) in a.residuals.iter().zip(&b.residuals) {
            let expect = rot(ra);
            prop_assert!((expect[0] - rb[0]).abs() < 1e-12 && (expect[1] - rb[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_permutes_reports(pts in planar_points(), shift in 1usize..6) {
        let k = shift % pts.len();
        let mut perm = pts.clone();
        perm.rotate_left(k);
        let a = balance_residual(&Configuration::free(2, pts.clone()).unwrap(), 2).unwrap();
        let b = balance_residual(&Configuration::free(2, perm.clone()).unwrap(), 2).unwrap();
        let da = distances(&Configuration::free(2, pts.clone()).unwrap()).unwrap();
        let db = distances(&Configuration::free(2, perm).unwrap()).unwrap();
        for i in 0..pts.len() {
            let j = (i + pts.len() - k) % pts.len();
            prop_assert!((a.residual_norms[i] - b.residual_norms[j]).abs() < 1e-14);
            prop_assert_eq!(da.d_alpha[i], db.d_alpha[j]);
        }
    }

    #[test]
    fn log_space_matches_direct_arithmetic(pts in planar_points()) {
        let cfg = Configuration::free(2, pts.clone()).unwrap();
        let report = balance_residual(&cfg, 2).unwrap();
        for (a, pa) in pts.iter().enumerate() {
            let mut sum = [0.0; 2];
            let mut total = 0.0;
            for (b, pb) in pts.iter().enumerate() {
                if a == b {
                    continue;
                }
                let e = [pb[0] - pa[0], pb[1] - pa[1]];
                let d = e[0].hypot(e[1]);
                let k = d.powf(-0.5) * (-d).exp();
                total += k;
                sum[0] += k * e[0] / d;
                sum[1] += k * e[1] / d;
            }
            let r = &report.residuals[a];
            let scale = 1e-12 * (sum[0].hypot(sum[1]) / total).max(1.0);
            prop_assert!((r[0] - sum[0] / total).abs() < scale && (r[1] - sum[1] / total).abs() < scale);
        }
    }
}
