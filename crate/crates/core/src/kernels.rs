//! Interaction integrals between two separated copies of `W`.
//!
//! For a fixed shift `y` every integrand depends only on the coordinate `t`
//! along `ŷ` and the distance `s` from that axis, so `R^n` integrals collapse
//! to `(t, s)` integrals with weight `ω_{n-2} s^{n-2}` (`ω_0 = 2`, `ω_1 = 2π`).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ground_state::GroundStateProfile;
use crate::quadrature::CompositeRule;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("separation {0} must be positive")]
    NonPositiveSeparation(f64),
    #[error("shift magnitude {0} must exceed 1")]
    ShiftTooSmall(f64),
    #[error("exponents must satisfy a > b > 0 (got a = {a}, b = {b})")]
    ExponentOrder { a: f64, b: f64 },
    #[error("dimension mismatch: shift has {got} components, profile is in R^{want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("truncated tail {tail_bound:e} exceeds 1e-8 of value {value:e}")]
    TruncationWarning { value: f64, tail_bound: f64 },
    #[error("ratio spread {spread:e} over [{d_lo}, {d_hi}] exceeds {limit}")]
    WindowNotAsymptotic {
        spread: f64,
        d_lo: f64,
        d_hi: f64,
        limit: f64,
    },
    #[error("invalid window [{0}, {1}]")]
    InvalidWindow(f64, f64),
}

/// `κ(d) = d^{-(n-1)/2} e^{-d}`.
pub fn kappa(d: f64, n: usize) -> Result<f64, KernelError> {
    Ok(log_kappa(d, n)?.exp())
}

/// `ln κ(d) = -(n-1)/2 ln d - d`, evaluated without forming `κ`.
pub fn log_kappa(d: f64, n: usize) -> Result<f64, KernelError> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(KernelError::NonPositiveSeparation(d));
    }
    Ok(-(n as f64 - 1.0) / 2.0 * d.ln() - d)
}

/// Quadrature settings shared by the kernel integrals.
#[derive(Debug, Clone)]
pub struct KernelQuadrature {
    pub rule: CompositeRule,
    /// Distance kept beyond each bump center before truncating.
    pub margin: f64,
}

impl Default for KernelQuadrature {
    fn default() -> Self {
        Self {
            rule: CompositeRule::default(),
            margin: 40.0,
        }
    }
}

impl KernelQuadrature {
    pub fn refined(&self) -> Self {
        Self {
            rule: self.rule.refined(),
            margin: self.margin,
        }
    }
}

/// An integral value with the bound on what truncation discarded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelValue {
    pub value: f64,
    pub tail_bound: f64,
}

impl KernelValue {
    /// Fails with [`KernelError::TruncationWarning`] when the discarded tail
    /// may exceed `1e-8` of the value.
    pub fn check_tail(&self) -> Result<(), KernelError> {
        if self.tail_bound > 1e-8 * self.value.abs() {
            Err(KernelError::TruncationWarning {
                value: self.value,
                tail_bound: self.tail_bound,
            })
        } else {
            Ok(())
        }
    }
}

fn magnitude(y: &[f64]) -> f64 {
    y.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_shift(profile: &GroundStateProfile, y: &[f64]) -> Result<f64, KernelError> {
    let n = profile.params.n;
    if y.len() != n {
        return Err(KernelError::DimensionMismatch {
            got: y.len(),
            want: n,
        });
    }
    let d = magnitude(y);
    if !(d > 1.0) {
        return Err(KernelError::ShiftTooSmall(d));
    }
    Ok(d)
}

/// Integrates `f(t, s)` over the truncated axisymmetric domain for bumps at
/// `t = 0` and `t = -d`. Summation order is fixed by the `t` nodes, so the
/// result does not depend on the number of threads.
fn axisymmetric_integral<F>(n: usize, d: f64, quad: &KernelQuadrature, f: F) -> f64
where
    F: Fn(f64, f64) -> f64 + Sync,
{
    let t_nodes = quad.rule.points(-d - quad.margin, quad.margin);
    match n {
        1 => t_nodes.iter().map(|&(t, w)| w * f(t, 0.0)).sum(),
        _ => {
            let s_nodes = quad.rule.points(0.0, quad.margin);
            let (omega, power) = if n == 2 {
                (2.0, 0)
            } else {
                (2.0 * std::f64::consts::PI, 1)
            };
            let partial: Vec<f64> = t_nodes
                .par_iter()
                .map(|&(t, wt)| {
                    let mut acc = 0.0;
                    for &(s, ws) in &s_nodes {
                        acc += ws * s.powi(power) * f(t, s);
                    }
                    wt * acc
                })
                .collect();
            omega * partial.iter().sum::<f64>()
        }
    }
}

/// `∫ W^q` over `R^n`, by radial quadrature.
fn w_power_mass(profile: &GroundStateProfile, q: f64, quad: &KernelQuadrature) -> f64 {
    let n = profile.params.n;
    let sphere = match n {
        1 => 2.0,
        2 => 2.0 * std::f64::consts::PI,
        _ => 4.0 * std::f64::consts::PI,
    };
    let r_hi = 2.0 * quad.margin + 40.0;
    sphere
        * quad
            .rule
            .integrate(0.0, r_hi, |r| r.powi(n as i32 - 1) * profile.w(r).powf(q))
}

/// `∫ W^a(x) W^b(x+y) dx` for `a > b > 0`.
pub fn pair_integral(
    profile: &GroundStateProfile,
    a: f64,
    b: f64,
    y: &[f64],
) -> Result<KernelValue, KernelError> {
    pair_integral_with(profile, a, b, y, &KernelQuadrature::default())
}

pub fn pair_integral_with(
    profile: &GroundStateProfile,
    a: f64,
    b: f64,
    y: &[f64],
    quad: &KernelQuadrature,
) -> Result<KernelValue, KernelError> {
    if !(a > b && b > 0.0) {
        return Err(KernelError::ExponentOrder { a, b });
    }
    let d = check_shift(profile, y)?;
    let n = profile.params.n;
    let value = axisymmetric_integral(n, d, quad, |t, s| {
        let r0 = (t * t + s * s).sqrt();
        let r1 = ((t + d) * (t + d) + s * s).sqrt();
        profile.w(r0).powf(a) * profile.w(r1).powf(b)
    });
    // Outside the box one of the two factors is evaluated at radius ≥ margin.
    let w_far = profile.w(quad.margin);
    let tail_bound = w_far.powf(a) * w_power_mass(profile, b, quad)
        + w_far.powf(b) * w_power_mass(profile, a, quad);
    Ok(KernelValue { value, tail_bound })
}

/// `Ψ(y) = ∫ W^{p-1}(x) ∇W(x) W(x+y) dx`, returned as a vector in `R^n`.
///
/// By axisymmetry `Ψ` is parallel to `ŷ`; only that component is integrated.
pub fn gradient_interaction(
    profile: &GroundStateProfile,
    y: &[f64],
) -> Result<Vec<f64>, KernelError> {
    gradient_interaction_with(profile, y, &KernelQuadrature::default()).map(|(v, _)| v)
}

/// As [`gradient_interaction`], also returning the parallel component with
/// its tail bound.
pub fn gradient_interaction_with(
    profile: &GroundStateProfile,
    y: &[f64],
    quad: &KernelQuadrature,
) -> Result<(Vec<f64>, KernelValue), KernelError> {
    let d = check_shift(profile, y)?;
    let n = profile.params.n;
    let p = profile.params.p;
    let par = axisymmetric_integral(n, d, quad, |t, s| {
        let r0 = (t * t + s * s).sqrt();
        if r0 == 0.0 {
            return 0.0;
        }
        let r1 = ((t + d) * (t + d) + s * s).sqrt();
        profile.w(r0).powf(p - 1.0) * profile.w_prime_at(r0) * (t / r0) * profile.w(r1)
    });
    let w_far = profile.w(quad.margin);
    let grad_far = profile.w_prime_at(quad.margin).abs();
    let grad_const = profile
        .r_grid
        .iter()
        .zip(&profile.w_values)
        .zip(&profile.w_prime)
        .skip(1)
        .fold(0.0f64, |m, ((_, w), wp)| m.max(wp.abs() / w));
    let tail_bound = w_far.powf(p - 1.0) * grad_far * w_power_mass(profile, 1.0, quad)
        + w_far * grad_const * w_power_mass(profile, p, quad);
    let vec = y.iter().map(|c| par * c / d).collect();
    Ok((
        vec,
        KernelValue {
            value: par,
            tail_bound,
        },
    ))
}

/// Fit of `Ψ(y)·ŷ / κ(|y|)` over a window of separations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbarFit {
    pub cbar: f64,
    pub spread: f64,
    pub separations: Vec<f64>,
    pub ratios: Vec<f64>,
}

/// Estimates `c̄` in `Ψ(y) ≈ c̄ κ(|y|) ŷ` from five separations spanning the
/// window. Fails if the ratios spread by more than 2%.
pub fn cbar_estimate(
    profile: &GroundStateProfile,
    window: [f64; 2],
) -> Result<CbarFit, KernelError> {
    let fit = cbar_samples(profile, window, 5)?;
    if !(fit.spread <= 0.02) {
        return Err(KernelError::WindowNotAsymptotic {
            spread: fit.spread,
            d_lo: window[0],
            d_hi: window[1],
            limit: 0.02,
        });
    }
    Ok(fit)
}

/// The samples behind [`cbar_estimate`], without the spread check.
pub fn cbar_samples(
    profile: &GroundStateProfile,
    window: [f64; 2],
    count: usize,
) -> Result<CbarFit, KernelError> {
    let [lo, hi] = window;
    if !(lo > 1.0 && hi >= lo) || count < 1 {
        return Err(KernelError::InvalidWindow(lo, hi));
    }
    let n = profile.params.n;
    let separations: Vec<f64> = if count == 1 || hi == lo {
        vec![lo]
    } else {
        (0..count)
            .map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64)
            .collect()
    };
    let mut ratios = Vec::with_capacity(separations.len());
    for &d in &separations {
        let mut y = vec![0.0; n];
        y[0] = d;
        let (_, par) = gradient_interaction_with(profile, &y, &KernelQuadrature::default())?;
        ratios.push(par.value / kappa(d, n)?);
    }
    let (spread, mean) = spread_and_mean(&ratios);
    Ok(CbarFit {
        cbar: mean,
        spread,
        separations,
        ratios,
    })
}

/// Large-separation limit of `Ψ(y)·ŷ / κ(|y|)`, namely
/// `(C/p) ∫ W^p(x) e^{-x_1} dx`, reduced to a radial integral.
///
/// The spherical average of `e^{-r θ_1}` is `2 cosh r`, `2π I_0(r)` and
/// `4π sinh(r)/r` in one, two and three dimensions; it is evaluated with the
/// `e^{-r}` factor removed so that the integrand stays bounded.
pub fn cbar_limit(profile: &GroundStateProfile) -> f64 {
    let n = profile.params.n;
    let p = profile.params.p;
    let theta = CompositeRule::new(16, 0.05).points(0.0, std::f64::consts::PI);
    let sphere = |r: f64| -> f64 {
        match n {
            1 => 1.0 + (-2.0 * r).exp(),
            2 => {
                2.0 * theta
                    .iter()
                    .map(|&(t, w)| w * (r * (t.cos() - 1.0)).exp())
                    .sum::<f64>()
            }
            _ => {
                if r < 1e-8 {
                    4.0 * std::f64::consts::PI * (1.0 - r)
                } else {
                    2.0 * std::f64::consts::PI * (-(-2.0 * r).exp_m1()) / r
                }
            }
        }
    };
    // The integrand decays like e^{-(p-1) r}.
    let r_hi = 40.0 / (p - 1.0) + 40.0;
    let rule = CompositeRule::new(16, 0.5);
    let integral = rule.integrate(0.0, r_hi, |r| {
        r.powi(n as i32 - 1) * (p * profile.log_w(r) + r).exp() * sphere(r)
    });
    profile.asympt_c * integral / p
}

/// `(max/min - 1, mean)` of positive samples; infinite spread if any sample
/// is non-positive.
pub fn spread_and_mean(values: &[f64]) -> (f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let spread = if lo > 0.0 {
        hi / lo - 1.0
    } else {
        f64::INFINITY
    };
    (spread, mean)
}

/// `sup_x W(x) W(x+y)`. For a radially decreasing `W` the supremum lies on
/// the segment joining the two centers; it is located on a fine grid and then
/// refined by successive parabolic fits of `ln W(x) + ln W(x+y)`.
pub fn product_sup(profile: &GroundStateProfile, y: &[f64]) -> Result<f64, KernelError> {
    let d = check_shift(profile, y)?;
    let g = |t: f64| profile.log_w(t) + profile.log_w(t + d);
    let samples = 4000;
    let (a, b) = (-d - 1.0, 1.0);
    let step = (b - a) / samples as f64;
    let mut best = (a, g(a));
    for k in 1..=samples {
        let t = a + step * k as f64;
        let v = g(t);
        if v > best.1 {
            best = (t, v);
        }
    }
    let (mut t, mut h) = (best.0, step);
    for _ in 0..30 {
        let (gm, g0, gp) = (g(t - h), g(t), g(t + h));
        let denom = gm - 2.0 * g0 + gp;
        if denom < 0.0 {
            let shift = 0.5 * h * (gm - gp) / denom;
            if shift.abs() <= h && g(t + shift) >= g0 {
                t += shift;
            }
        }
        h *= 0.5;
        if h < 1e-10 {
            break;
        }
    }
    Ok(g(t).max(best.1).exp())
}

/// Sweep of [`pair_integral`] over separations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelReport {
    pub y_magnitudes: Vec<f64>,
    pub raw_values: Vec<f64>,
    /// Value divided by `|y|^{-b(n-1)/2} e^{-b|y|}`.
    pub normalized_ratios: Vec<f64>,
    pub tail_bounds: Vec<f64>,
    /// Mean of the normalized ratios.
    pub cbar: f64,
    pub spread: f64,
}

pub fn pair_integral_sweep(
    profile: &GroundStateProfile,
    a: f64,
    b: f64,
    magnitudes: &[f64],
) -> Result<KernelReport, KernelError> {
    let n = profile.params.n;
    let mut raw_values = Vec::new();
    let mut normalized_ratios = Vec::new();
    let mut tail_bounds = Vec::new();
    for &d in magnitudes {
        let mut y = vec![0.0; n];
        y[0] = d;
        let v = pair_integral(profile, a, b, &y)?;
        raw_values.push(v.value);
        normalized_ratios.push(v.value / (b * log_kappa(d, n)?).exp());
        tail_bounds.push(v.tail_bound);
    }
    let (spread, cbar) = spread_and_mean(&normalized_ratios);
    Ok(KernelReport {
        y_magnitudes: magnitudes.to_vec(),
        raw_values,
        normalized_ratios,
        tail_bounds,
        cbar,
        spread,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kappa_values() {
        assert!((kappa(1.0, 1).unwrap() - (-1f64).exp()).abs() < 1e-15);
        assert!((kappa(10.0, 3).unwrap() - 4.539992976248485e-6).abs() < 1e-18);
        let lk = log_kappa(800.0, 2).unwrap();
        let want = -0.5 * 800f64.ln() - 800.0;
        assert!(((lk - want) / want).abs() < 1e-15);
        assert_eq!(kappa(800.0, 2).unwrap(), 0.0);
        assert!(matches!(
            kappa(0.0, 1),
            Err(KernelError::NonPositiveSeparation(_))
        ));
        assert!(log_kappa(-1.0, 2).is_err());
    }

    #[test]
    fn spread_of_constant_is_zero() {
        let (s, m) = spread_and_mean(&[2.0, 2.0, 2.0]);
        assert_eq!(s, 0.0);
        assert_eq!(m, 2.0);
        assert!(spread_and_mean(&[1.0, -1.0]).0.is_infinite());
    }
}
