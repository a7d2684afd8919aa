use std::sync::OnceLock;

use bumpkit::ground_state::{one_dim_exact, solve_ground_state, GroundStateProfile, ModelParams};
use bumpkit::particles::{balance_residual, Configuration};
use bumpkit::pde::{
    build_ansatz, discrete_ground_state, extract_peaks, find_peaks, newton_solve, residual,
    DiscreteField, GridSpec, NewtonOptions, PdeError, DEFAULT_EXCLUSION_RADIUS,
    DEFAULT_PEAK_THRESHOLD,
};

fn profile(p: f64) -> GroundStateProfile {
    solve_ground_state(ModelParams::new(1, p).unwrap(), 1e-8).unwrap()
}

fn cubic() -> &'static GroundStateProfile {
    static P: OnceLock<GroundStateProfile> = OnceLock::new();
    P.get_or_init(|| profile(3.0))
}

fn sesqui() -> &'static GroundStateProfile {
    static P: OnceLock<GroundStateProfile> = OnceLock::new();
    P.get_or_init(|| profile(1.5))
}

fn origin_1d() -> Configuration {
    Configuration::free(1, vec![vec![0.0]]).unwrap()
}

#[test]
fn constants_have_zero_residual() {
    let g = GridSpec::periodic(vec![10.0], 0.05).unwrap();
    assert_eq!(residual(&DiscreteField::constant(g.clone(), 1.0), 2.5), 0.0);
    assert_eq!(residual(&DiscreteField::zeros(g), 2.5), 0.0);
    let g2 = GridSpec::periodic(vec![4.0, 4.0], 0.1).unwrap();
    assert_eq!(residual(&DiscreteField::constant(g2, 1.0), 1.5), 0.0);
}

#[test]
fn sampled_profile_residual_is_second_order() {
    let r = |h: f64| {
        let g = GridSpec::dirichlet_box(vec![20.0], h).unwrap();
        residual(
            &DiscreteField::from_fn(g, |x| one_dim_exact(3.0, x[0])),
            3.0,
        )
    };
    let ratio = r(0.1) / r(0.05);
    assert!((ratio / 4.0 - 1.0).abs() < 0.2, "{ratio}");
}

#[test]
fn ansatz_examples() {
    let g = GridSpec::dirichlet_box(vec![30.0], 0.05).unwrap();
    let single = build_ansatz(cubic(), &origin_1d(), &g).unwrap();
    let err = (0..g.len())
        .map(|i| (single.values[i] - cubic().w(g.coord(0, i))).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-8);

    let pair = Configuration::free(1, vec![vec![-6.0], vec![6.0]]).unwrap();
    let field = build_ansatz(cubic(), &pair, &g).unwrap();
    let mid = g.len() / 2;
    assert_eq!(g.coord(0, mid), 0.0);
    assert!((field.values[mid] / (2.0 * cubic().w(6.0)) - 1.0).abs() < 1e-12);

    let empty = Configuration {
        n: 1,
        geometry: bumpkit::particles::Geometry::FreeSpace,
        points: vec![],
    };
    assert!(build_ansatz(cubic(), &empty, &g)
        .unwrap()
        .values
        .iter()
        .all(|&v| v == 0.0));

    let outside = Configuration::free(1, vec![vec![40.0]]).unwrap();
    assert!(matches!(
        build_ansatz(cubic(), &outside, &g),
        Err(PdeError::CenterOutOfDomain { index: 0 })
    ));
}

#[test]
fn newton_keeps_exact_solutions() {
    let g = GridSpec::periodic(vec![12.0], 0.05).unwrap();
    let one = DiscreteField::constant(g, 1.0);
    let out = newton_solve(&one, 1.5, &NewtonOptions::default()).unwrap();
    assert!(out.iterations <= 1);
    assert_eq!(out.field, one);

    let g = GridSpec::dirichlet_box(vec![30.0], 0.05).unwrap();
    let start = build_ansatz(cubic(), &origin_1d(), &g).unwrap();
    let solved = newton_solve(&start, 3.0, &NewtonOptions::default()).unwrap();
    let again = newton_solve(&solved.field, 3.0, &NewtonOptions::default()).unwrap();
    assert!(again.iterations <= 1);
    let moved = solved
        .field
        .values
        .iter()
        .zip(&again.field.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(moved < 1e-9);
}

#[test]
fn single_bump_converges_to_ground_state() {
    let h = 0.05;
    let g = GridSpec::dirichlet_box(vec![30.0], h).unwrap();
    let start = build_ansatz(cubic(), &origin_1d(), &g).unwrap();
    let out = newton_solve(&start, 3.0, &NewtonOptions::default()).unwrap();
    assert!(out.residual < 1e-10 && out.nonnegative);
    let dist = (0..g.len())
        .map(|i| (out.field.values[i] - cubic().w(g.coord(0, i))).abs())
        .fold(0.0, f64::max);
    // O(h²) discretization error of the 3-point Laplacian.
    assert!(dist < 1e-6 + h * h, "{dist:e}");
}

#[test]
fn solution_converges_under_refinement() {
    let sup = |h: f64| {
        let g = GridSpec::dirichlet_box(vec![20.0], h).unwrap();
        let start = build_ansatz(cubic(), &origin_1d(), &g).unwrap();
        newton_solve(&start, 3.0, &NewtonOptions::default())
            .unwrap()
            .field
            .sup_norm()
    };
    let (a, b, c) = (sup(0.1), sup(0.05), sup(0.025));
    let order = ((a - b) / (b - c)).abs().log2();
    assert!(order >= 1.8, "{order}");
}

#[test]
fn three_bumps_on_a_torus() {
    let g = GridSpec::periodic(vec![36.0], 0.05).unwrap();
    let centers = Configuration::ring(36.0, &[0.0, 12.0, 24.0]).unwrap();
    let start = build_ansatz(sesqui(), &centers, &g).unwrap();
    let out = newton_solve(&start, 1.5, &NewtonOptions::default()).unwrap();
    assert!(out.residual < 1e-10 && out.nonnegative);
    let peaks = find_peaks(&out.field, DEFAULT_PEAK_THRESHOLD, DEFAULT_EXCLUSION_RADIUS).unwrap();
    assert_eq!(peaks.len(), 3);
    assert!(peaks.iter().all(|p| p.value > 1.0));
    let mut xs: Vec<f64> = peaks.iter().map(|p| p.position[0]).collect();
    xs.sort_by(f64::total_cmp);
    let shift = xs[0];
    for (x, target) in xs.iter().zip([0.0, 12.0, 24.0]) {
        assert!((x - shift - target).abs() < 0.05);
    }
    let config =
        extract_peaks(&out.field, DEFAULT_PEAK_THRESHOLD, DEFAULT_EXCLUSION_RADIUS).unwrap();
    assert!(balance_residual(&config, 1).unwrap().max_residual() < 1e-8);
}

#[test]
fn shifting_the_ansatz_shifts_the_solution() {
    let h = 0.05;
    let g = GridSpec::periodic(vec![36.0], h).unwrap();
    let a = Configuration::ring(36.0, &[0.0, 12.3, 23.8]).unwrap();
    let b = Configuration::ring(36.0, &[h, 12.3 + h, 23.8 + h]).unwrap();
    let opts = NewtonOptions::default();
    let ua = newton_solve(&build_ansatz(sesqui(), &a, &g).unwrap(), 1.5, &opts)
        .unwrap()
        .field;
    let ub = newton_solve(&build_ansatz(sesqui(), &b, &g).unwrap(), 1.5, &opts)
        .unwrap()
        .field;
    let m = g.len();
    let err = (0..m)
        .map(|i| (ub.values[(i + 1) % m] - ua.values[i]).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-9, "{err:e}");
}

#[test]
fn quadratic_fit_recovers_off_node_center() {
    for h in [0.1, 0.05] {
        let g = GridSpec::dirichlet_box(vec![20.0], h).unwrap();
        let c = 0.37 * h;
        let field = DiscreteField::from_fn(g, |x| cubic().w(x[0] - c));
        let peaks = find_peaks(&field, DEFAULT_PEAK_THRESHOLD, DEFAULT_EXCLUSION_RADIUS).unwrap();
        assert_eq!(peaks.len(), 1);
        assert!(
            (peaks[0].position[0] - c).abs() < h * h,
            "h = {h}: {}",
            peaks[0].position[0]
        );
    }
}

#[test]
fn constant_field_has_no_peaks() {
    let g = GridSpec::periodic(vec![10.0], 0.05).unwrap();
    assert!(matches!(
        find_peaks(&DiscreteField::constant(g, 1.0), 0.5, 5.0),
        Err(PdeError::NoPeaks(_))
    ));
}

#[test]
fn binary_format_round_trip() {
    let g = GridSpec::dirichlet_box(vec![3.0, 2.0], 0.5).unwrap();
    let f = DiscreteField::from_fn(g, |x| x[0] - 2.0 * x[1]);
    let mut buf = Vec::new();
    f.write_binary(&mut buf).unwrap();
    let back = DiscreteField::read_binary(&buf[..]).unwrap();
    assert_eq!(back, f);
    assert!(DiscreteField::read_binary(&buf[..buf.len() - 3]).is_err());
}

#[test]
fn discrete_ground_state_matches_solver() {
    let h = 0.05;
    let reference = discrete_ground_state(cubic(), h).unwrap();
    let g = GridSpec::dirichlet_box(vec![30.0], h).unwrap();
    let out = newton_solve(
        &build_ansatz(cubic(), &origin_1d(), &g).unwrap(),
        3.0,
        &NewtonOptions::default(),
    )
    .unwrap();
    let err = (0..g.len())
        .map(|i| {
            let x = g.coord(0, i);
            if x.abs() > 20.0 {
                0.0
            } else {
                (out.field.values[i] - reference.w(x)).abs()
            }
        })
        .fold(0.0, f64::max);
    assert!(err < 1e-9, "{err:e}");
}

#[test]
fn underresolved_grid_is_rejected() {
    let g = GridSpec::periodic(vec![10.0], 0.1).unwrap();
    assert!(matches!(
        g.check_resolution(1.5),
        Err(PdeError::Underresolved { .. })
    ));
    assert!(g.check_resolution(2.5).is_ok());
}
