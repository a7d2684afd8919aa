use std::sync::OnceLock;

use bumpkit::ground_state::{
    asymptotic_constant, eval_w, eval_z, linearized_kernel_check, max_ode_residual, one_dim_exact,
    solve_ground_state, GroundStateProfile, ModelParams,
};
use proptest::prelude::*;

fn cubic() -> &'static GroundStateProfile {
    static P: OnceLock<GroundStateProfile> = OnceLock::new();
    P.get_or_init(|| solve_ground_state(ModelParams::new(1, 3.0).unwrap(), 1e-8).unwrap())
}

fn planar() -> &'static GroundStateProfile {
    static P: OnceLock<GroundStateProfile> = OnceLock::new();
    P.get_or_init(|| solve_ground_state(ModelParams::new(2, 1.5).unwrap(), 1e-8).unwrap())
}

#[test]
fn peak_values_match_closed_forms() {
    assert!((cubic().w0 - 2f64.sqrt()).abs() < 1e-6);
    let quadratic = solve_ground_state(ModelParams::new(1, 2.0).unwrap(), 1e-8).unwrap();
    assert!((quadratic.w0 - 1.5).abs() < 1e-6);
    assert!((eval_w(cubic(), &[0.0]) - std::f64::consts::SQRT_2).abs() < 1e-6);
}

#[test]
fn one_dim_profiles_match_sech_family() {
    for p in [1.5, 2.5, 4.0] {
        let prof = solve_ground_state(ModelParams::new(1, p).unwrap(), 1e-8).unwrap();
        let err = (0..=3000)
            .map(|k| {
                let x = k as f64 * 0.01;
                (prof.w(x) - one_dim_exact(p, x)).abs()
            })
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "p = {p}: {err:e}");
    }
}

#[test]
fn derivative_matches_closed_form() {
    let z = eval_z(cubic(), &[1.0], 0);
    let exact = -(2f64.sqrt()) / 1f64.cosh() * 1f64.tanh();
    assert!((z - exact).abs() < 1e-5, "{z} vs {exact}");
    assert_eq!(eval_z(cubic(), &[0.0], 0), 0.0);
}

#[test]
fn profile_is_positive_and_decreasing() {
    for prof in [cubic(), planar()] {
        assert!(prof.w_values.iter().all(|&w| w > 0.0));
        assert!(prof.w_values.windows(2).all(|w| w[1] < w[0]));
        let far: Vec<f64> = (0..20).map(|k| prof.w(20.0 + 5.0 * k as f64)).collect();
        assert!(far.iter().all(|&w| w > 0.0));
        assert!(far.windows(2).all(|w| w[1] < w[0]));
    }
}

#[test]
fn residual_below_tolerance() {
    assert!(max_ode_residual(cubic()) < 1e-8);
    assert!(max_ode_residual(planar()) < 1e-8);
}

#[test]
fn tail_is_continuous_and_flat() {
    for prof in [cubic(), planar()] {
        let s = prof.tail_switch_radius;
        let inside = prof.w(s - 1e-9);
        let outside = prof.w(s + 1e-9);
        assert!((inside / outside - 1.0).abs() < 5e-3);
        let fit = asymptotic_constant(prof).unwrap();
        assert!(fit.spread < 0.01);
    }
}

#[test]
fn asymptotic_constants() {
    let c3 = asymptotic_constant(cubic()).unwrap().c;
    assert!((c3 / (2.0 * 2f64.sqrt()) - 1.0).abs() < 0.01, "{c3}");
    let quadratic = solve_ground_state(ModelParams::new(1, 2.0).unwrap(), 1e-8).unwrap();
    let c2 = asymptotic_constant(&quadratic).unwrap().c;
    assert!((c2 / 6.0 - 1.0).abs() < 0.01, "{c2}");
    let c = asymptotic_constant(planar()).unwrap();
    assert!(c.c.is_finite() && c.c > 0.0);
}

#[test]
fn kernel_directions_solve_linearized_equation() {
    for prof in [cubic(), planar()] {
        let check = linearized_kernel_check(prof);
        assert!(check.kernel_residual < 1e-6, "{}", check.kernel_residual);
        // L(W) = (p - 1) W^p: the identity residual is small, L(W) itself is not.
        assert!(check.w_identity_residual < 1e-6);
        assert_eq!(check.zero_residual, 0.0);
        assert!(check.gradient_constant.is_finite());
    }
}

#[test]
fn centered_difference_of_w_converges_to_z() {
    let prof = planar();
    let x = [1.3, -0.4];
    let fd =
        |h: f64| (eval_w(prof, &[x[0] + h, x[1]]) - eval_w(prof, &[x[0] - h, x[1]])) / (2.0 * h);
    let z = eval_z(prof, &x, 0);
    let e1 = (fd(0.02) - z).abs();
    let e2 = (fd(0.01) - z).abs();
    let order = (e1 / e2).log2();
    assert!(order >= 1.9, "order {order} ({e1:e}, {e2:e})");
}

#[test]
fn json_round_trip() {
    let json = cubic().to_json();
    assert!(json.contains("\"asympt_C\""));
    let back = GroundStateProfile::from_json(&json).unwrap();
    assert_eq!(&back, cubic());
    assert!(GroundStateProfile::from_json("{}").is_err());
}

#[test]
fn invalid_parameters_are_rejected() {
    assert!(ModelParams::new(3, 5.0).is_err());
    assert!(ModelParams::new(1, 0.9).is_err());
    assert!(ModelParams::new(4, 2.0).is_err());
}

proptest! {
    #[test]
    fn w_is_radial(x in -20.0f64..20.0, y in -20.0f64..20.0, angle in 0.0f64..6.3) {
        let prof = planar();
        let (s, c) = angle.sin_cos();
        let a = eval_w(prof, &[x, y]);
        let b = eval_w(prof, &[c * x - s * y, s * x + c * y]);
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-300));
    }

    #[test]
    fn z_is_odd_and_dominated_by_w(x in -30.0f64..30.0, y in -30.0f64..30.0) {
        let prof = planar();
        for axis in 0..2 {
            let z = eval_z(prof, &[x, y], axis);
            prop_assert_eq!(z, -eval_z(prof, &[-x, -y], axis));
            prop_assert!(z.abs() <= 2.0 * eval_w(prof, &[x, y]));
        }
    }
}
