//! Ground state `W` of `-ΔW + W = W^p` in `R^n` and its evaluators.
//!
//! `W` is radial, so everything reduces to the ODE
//! `W'' + (n-1)/r W' - W + W^p = 0` with `W'(0) = 0` and `W → 0`.
//! The initial value `W(0)` is first bracketed by bisection on the shooting
//! dichotomy (trajectory crosses zero vs. turns back up). Because a forward
//! shot is exponentially unstable past `r ≈ 15`, the profile itself is then
//! computed by matching a forward shot from the origin with a backward shot
//! from `r_max` that starts on the decaying asymptotic branch; Newton on
//! `(W(0), amplitude)` makes value and slope continuous at the fitting point.

use serde::{Deserialize, Serialize};

use crate::linalg::DenseLu;
use crate::ode::{self, Control, OdeError, StepperOptions, Termination};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GroundStateError {
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    #[error("shooting bracket [{lo}, {hi}] does not straddle the ground state")]
    NoBracket { lo: f64, hi: f64 },
    #[error("ground state not converged: residual {residual:e} exceeds tolerance {tol:e}")]
    NoConvergence { residual: f64, tol: f64 },
    #[error("asymptotic tail not resolved: spread {spread:e} over [{r_lo}, {r_hi}]")]
    TailNotResolved { spread: f64, r_lo: f64, r_hi: f64 },
    #[error("malformed profile: {0}")]
    MalformedProfile(String),
    #[error(transparent)]
    Ode(#[from] OdeError),
}

/// Dimension `n` and exponent `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub n: usize,
    pub p: f64,
}

impl ModelParams {
    pub fn new(n: usize, p: f64) -> Result<Self, GroundStateError> {
        let params = Self { n, p };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), GroundStateError> {
        if !(1..=3).contains(&self.n) {
            return Err(GroundStateError::InvalidParams(format!(
                "dimension {} outside 1..=3",
                self.n
            )));
        }
        if !self.p.is_finite() || self.p <= 1.0 {
            return Err(GroundStateError::InvalidParams(format!(
                "exponent {} must be finite and > 1",
                self.p
            )));
        }
        if self.n == 3 && self.p >= 5.0 {
            return Err(GroundStateError::InvalidParams(format!(
                "exponent {} is not Sobolev subcritical in dimension 3",
                self.p
            )));
        }
        Ok(())
    }

    /// `(n-1)/2`, the power of `r` in the decay law.
    pub fn decay_power(&self) -> f64 {
        (self.n as f64 - 1.0) / 2.0
    }

    /// Value at the origin of the explicit 1D solution,
    /// `((p+1)/2)^{1/(p-1)}`.
    pub fn one_dim_peak(&self) -> f64 {
        ((self.p + 1.0) / 2.0).powf(1.0 / (self.p - 1.0))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GroundStateOptions {
    /// Truncation radius of the computed profile.
    pub r_max: f64,
    /// Preferred radius beyond which the asymptotic formula is used. The
    /// solver moves it outward when the tail is not yet flat there.
    pub tail_switch_radius: f64,
    /// Fitting point where the forward and backward shots are matched.
    pub fit_radius: f64,
    /// Largest integration step; also the largest spacing of the stored grid.
    pub h_max: f64,
}

impl Default for GroundStateOptions {
    fn default() -> Self {
        Self {
            r_max: 40.0,
            tail_switch_radius: 15.0,
            fit_radius: 4.0,
            h_max: 0.005,
        }
    }
}

const TAIL_SPREAD_MAX: f64 = 0.01;
const TAIL_MISMATCH_MAX: f64 = 0.005;

/// Radial samples of the ground state plus the fitted tail constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundStateProfile {
    pub params: ModelParams,
    pub r_grid: Vec<f64>,
    pub w_values: Vec<f64>,
    pub w_prime: Vec<f64>,
    pub w0: f64,
    pub r_max: f64,
    #[serde(rename = "asympt_C")]
    pub asympt_c: f64,
    pub tail_switch_radius: f64,
    /// Relative spread `max/min - 1` of `r^{(n-1)/2} e^r W` over the tail window.
    pub tail_spread: f64,
    pub tail_resolved: bool,
}

/// Fitted constant in `W(r) ~ C r^{-(n-1)/2} e^{-r}` with its window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticFit {
    pub c: f64,
    pub spread: f64,
    pub r_lo: f64,
    pub r_hi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearizedCheck {
    /// Sup over interior nodes of `|L Z|` for the radial factor of `Z_i`.
    pub kernel_residual: f64,
    /// Sup of `|L W - (p-1) W^p|`.
    pub w_identity_residual: f64,
    /// Residual of the zero function.
    pub zero_residual: f64,
    /// Measured constant in `|∇W| ≤ C W` over the stored grid.
    pub gradient_constant: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ShotOutcome {
    Crossed,
    TurnedUp,
}

fn rhs(n: usize, p: f64) -> impl Fn(f64, &[f64; 2]) -> [f64; 2] {
    let k = n as f64 - 1.0;
    move |r, y| {
        let w = y[0];
        let wp = y[1];
        let nl = w.abs().powf(p - 1.0) * w;
        let damping = if r > 0.0 { k / r * wp } else { 0.0 };
        [wp, -damping + w - nl]
    }
}

/// Series start `W ≈ w0 + a r² + b r⁴ + c r⁶` that removes the `(n-1)/r`
/// singularity.
fn series_start(n: usize, p: f64, w0: f64, r: f64) -> [f64; 2] {
    let nf = n as f64;
    let a = (w0 - w0.powf(p)) / (2.0 * nf);
    let b = a * (1.0 - p * w0.powf(p - 1.0)) / (4.0 * (nf + 2.0));
    let c = ((1.0 - p * w0.powf(p - 1.0)) * b - 0.5 * p * (p - 1.0) * w0.powf(p - 2.0) * a * a)
        / (6.0 * (nf + 4.0));
    let r2 = r * r;
    [
        w0 + r2 * (a + r2 * (b + r2 * c)),
        r * (2.0 * a + r2 * (4.0 * b + 6.0 * c * r2)),
    ]
}

fn stepper(h_max: f64) -> StepperOptions {
    StepperOptions {
        rtol: 1e-13,
        atol: 1e-300,
        h_init: h_max,
        h_max,
        max_steps: 10_000_000,
    }
}

fn classify(
    params: &ModelParams,
    w0: f64,
    opts: &GroundStateOptions,
) -> Result<(ShotOutcome, f64), OdeError> {
    let f = rhs(params.n, params.p);
    let r_start = opts.h_max;
    let y0 = series_start(params.n, params.p, w0, r_start);
    let mut outcome = None;
    let mut last = y0;
    let mut r_event = opts.r_max;
    let term = ode::integrate(f, r_start, y0, opts.r_max, &stepper(0.05), |r, y| {
        last = *y;
        if y[0] < 0.0 {
            outcome = Some(ShotOutcome::Crossed);
            r_event = r;
            Control::Stop
        } else if y[1] > 0.0 {
            outcome = Some(ShotOutcome::TurnedUp);
            r_event = r;
            Control::Stop
        } else {
            Control::Continue
        }
    })?;
    let outcome = match (term, outcome) {
        (Termination::Stopped, Some(o)) => o,
        // Still decaying at r_max: the sign of W + W' tracks the growing mode.
        _ => {
            if last[0] + last[1] > 0.0 {
                ShotOutcome::TurnedUp
            } else {
                ShotOutcome::Crossed
            }
        }
    };
    Ok((outcome, r_event))
}

/// Decaying solution of the linear equation `ΔW = W`, i.e. `r^{-ν} K_ν(r)`
/// with `ν = (n-2)/2`, up to a constant, as value and derivative. Uses the
/// large-argument expansion of `K_ν`.
fn linear_tail(n: usize, r: f64) -> [f64; 2] {
    let nu = (n as f64 - 2.0) / 2.0;
    let m = (n as f64 - 1.0) / 2.0;
    let mu = 4.0 * nu * nu;
    let mut term = 1.0;
    let mut s = 1.0;
    let mut ds = 0.0;
    for k in 1..=8 {
        let kf = k as f64;
        term *= (mu - (2.0 * kf - 1.0).powi(2)) / (8.0 * kf);
        if term == 0.0 {
            break;
        }
        s += term / r.powi(k);
        ds -= kf * term / r.powi(k + 1);
    }
    let base = r.powf(-m) * (-r).exp();
    let w = base * s;
    let wp = w * (-m / r - 1.0) + base * ds;
    [w, wp]
}

struct Shot {
    r: Vec<f64>,
    w: Vec<f64>,
    wp: Vec<f64>,
}

impl Shot {
    /// Keeps accepted steps no closer than `0.9 h_max`: second differences of
    /// the stored samples amplify rounding by `1/h²`. The final point always
    /// replaces a too-close predecessor.
    fn record(&mut self, r: f64, y: &[f64; 2], is_final: bool, h_max: f64) {
        let gap = (r - self.r.last().unwrap()).abs();
        if gap < 0.9 * h_max {
            if !is_final {
                return;
            }
            if self.r.len() > 1 {
                self.r.pop();
                self.w.pop();
                self.wp.pop();
            }
        }
        self.r.push(r);
        self.w.push(y[0]);
        self.wp.push(y[1]);
    }

    fn end(&self) -> (f64, f64) {
        (*self.w.last().unwrap(), *self.wp.last().unwrap())
    }
}

fn forward_shot(params: &ModelParams, w0: f64, r_fit: f64, h_max: f64) -> Result<Shot, OdeError> {
    // Starting one grid step out keeps the stored grid uniform near the origin.
    let f = rhs(params.n, params.p);
    let r_start = h_max;
    let y0 = series_start(params.n, params.p, w0, r_start);
    let mut shot = Shot {
        r: vec![r_start],
        w: vec![y0[0]],
        wp: vec![y0[1]],
    };
    ode::integrate(f, r_start, y0, r_fit, &stepper(h_max), |r, y| {
        shot.record(r, y, r == r_fit, h_max);
        Control::Continue
    })?;
    Ok(shot)
}

fn backward_shot(
    params: &ModelParams,
    log_amp: f64,
    r_fit: f64,
    opts: &GroundStateOptions,
) -> Result<Shot, OdeError> {
    let f = rhs(params.n, params.p);
    let [w, wp] = linear_tail(params.n, opts.r_max);
    let amp = log_amp.exp();
    let mut y0 = [amp * w, amp * wp];
    // Leading nonlinear correction, -W^p / (p² - 1) along the decaying branch.
    let p = params.p;
    let corr = y0[0].powf(p) / (p * p - 1.0);
    y0[0] -= corr;
    y0[1] += p * corr;
    let mut shot = Shot {
        r: vec![opts.r_max],
        w: vec![y0[0]],
        wp: vec![y0[1]],
    };
    ode::integrate(f, opts.r_max, y0, r_fit, &stepper(opts.h_max), |r, y| {
        shot.record(r, y, r == r_fit, opts.h_max);
        Control::Continue
    })?;
    Ok(shot)
}

/// Mismatch at the fitting point in log-value and log-derivative.
fn mismatch(fwd: &Shot, bwd: &Shot) -> [f64; 2] {
    let (wf, wpf) = fwd.end();
    let (wb, wpb) = bwd.end();
    if wf <= 0.0 || wb <= 0.0 {
        return [f64::NAN, f64::NAN];
    }
    [wf.ln() - wb.ln(), wpf / wf - wpb / wb]
}

/// Solves for the ground state with default options.
pub fn solve_ground_state(
    params: ModelParams,
    tol: f64,
) -> Result<GroundStateProfile, GroundStateError> {
    solve_ground_state_with(params, tol, &GroundStateOptions::default())
}

pub fn solve_ground_state_with(
    params: ModelParams,
    tol: f64,
    opts: &GroundStateOptions,
) -> Result<GroundStateProfile, GroundStateError> {
    params.validate()?;
    if !(tol > 0.0) {
        return Err(GroundStateError::InvalidParams(format!(
            "tolerance {tol} must be positive"
        )));
    }
    if !(opts.r_max > opts.fit_radius + 5.0) || opts.h_max <= 0.0 {
        return Err(GroundStateError::InvalidParams(
            "inconsistent radial options".into(),
        ));
    }

    // Bisection on the shooting dichotomy.
    let mut lo = 1.0 + 1e-6;
    let mut hi = 4.0 * params.one_dim_peak();
    if classify(&params, lo, opts)?.0 != ShotOutcome::TurnedUp
        || classify(&params, hi, opts)?.0 != ShotOutcome::Crossed
    {
        return Err(GroundStateError::NoBracket { lo, hi });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match classify(&params, mid, opts)?.0 {
            ShotOutcome::TurnedUp => lo = mid,
            ShotOutcome::Crossed => hi = mid,
        }
    }
    let mut w0 = 0.5 * (lo + hi);

    // The core has width ~ W(0)^{-(p-1)/2}; shrink the step to match it.
    let core_scale = w0.powf(-(params.p - 1.0) / 2.0).min(1.0);
    let opts = &GroundStateOptions {
        h_max: opts.h_max * core_scale,
        ..*opts
    };

    // Two-sided matching at the fitting point.
    let r_fit = opts.fit_radius;
    let mut fwd = forward_shot(&params, w0, r_fit, opts.h_max)?;
    let probe = backward_shot(&params, 0.0, r_fit, opts)?;
    let mut log_amp = fwd.end().0.ln() - probe.end().0.ln();
    let mut bwd = backward_shot(&params, log_amp, r_fit, opts)?;
    let mut f = mismatch(&fwd, &bwd);
    for _ in 0..40 {
        let size = f[0].abs().max(f[1].abs());
        if !size.is_finite() {
            break;
        }
        if size < 1e-14 {
            break;
        }
        let dw = 1e-7 * w0;
        let da = 1e-7;
        let fwd_w = forward_shot(&params, w0 + dw, r_fit, opts.h_max)?;
        let bwd_a = backward_shot(&params, log_amp + da, r_fit, opts)?;
        let f_w = mismatch(&fwd_w, &bwd);
        let f_a = mismatch(&fwd, &bwd_a);
        let jac = vec![
            (f_w[0] - f[0]) / dw,
            (f_a[0] - f[0]) / da,
            (f_w[1] - f[1]) / dw,
            (f_a[1] - f[1]) / da,
        ];
        let lu = match DenseLu::factor(jac, 2) {
            Ok(lu) => lu,
            Err(_) => break,
        };
        let mut step = [-f[0], -f[1]];
        lu.solve(&mut step);
        // Damp until the mismatch decreases.
        let mut accepted = false;
        let mut lambda = 1.0;
        for _ in 0..20 {
            let w_try = w0 + lambda * step[0];
            let a_try = log_amp + lambda * step[1];
            let fwd_t = forward_shot(&params, w_try, r_fit, opts.h_max)?;
            let bwd_t = backward_shot(&params, a_try, r_fit, opts)?;
            let f_t = mismatch(&fwd_t, &bwd_t);
            let s_t = f_t[0].abs().max(f_t[1].abs());
            if s_t.is_finite() && s_t < size {
                w0 = w_try;
                log_amp = a_try;
                fwd = fwd_t;
                bwd = bwd_t;
                f = f_t;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    // Assemble the grid: origin, forward nodes, then backward nodes reversed.
    let mut r_grid = vec![0.0];
    let mut w_values = vec![w0];
    let mut w_prime = vec![0.0];
    r_grid.extend_from_slice(&fwd.r);
    w_values.extend_from_slice(&fwd.w);
    w_prime.extend_from_slice(&fwd.wp);
    for k in (0..bwd.r.len().saturating_sub(1)).rev() {
        r_grid.push(bwd.r[k]);
        w_values.push(bwd.w[k]);
        w_prime.push(bwd.wp[k]);
    }

    let mut profile = GroundStateProfile {
        params,
        r_grid,
        w_values,
        w_prime,
        w0,
        r_max: opts.r_max,
        asympt_c: f64::NAN,
        tail_switch_radius: opts.tail_switch_radius,
        tail_spread: f64::NAN,
        tail_resolved: false,
    };
    profile.fit_tail(opts.tail_switch_radius);

    let residual = max_ode_residual(&profile);
    let monotone = profile.w_values.iter().all(|&w| w > 0.0)
        && profile.w_values.windows(2).all(|p| p[1] < p[0]);
    if !residual.is_finite() || residual > tol || !monotone {
        return Err(GroundStateError::NoConvergence {
            residual: if monotone { residual } else { f64::INFINITY },
            tol,
        });
    }
    Ok(profile)
}

impl GroundStateProfile {
    /// Chooses the tail switch radius and fits `C`.
    ///
    /// The first candidate `s ∈ {preferred, preferred+1, …, r_max-5}` whose
    /// window `[s, r_max]` has spread below 1% and whose endpoint matches the
    /// fitted constant within 0.5% is used. Otherwise the last candidate is
    /// kept and the tail is flagged as unresolved.
    fn fit_tail(&mut self, preferred: f64) {
        let last = self.r_max - 5.0;
        let mut s = preferred.min(last);
        loop {
            let fit = self.tail_window_fit(s);
            let mismatch = (self.tail_ratio_at(s) / fit.c - 1.0).abs();
            let ok = fit.spread < TAIL_SPREAD_MAX && mismatch < TAIL_MISMATCH_MAX;
            if ok || s + 1.0 > last {
                self.tail_switch_radius = s;
                self.asympt_c = fit.c;
                self.tail_spread = fit.spread;
                self.tail_resolved = ok;
                return;
            }
            s += 1.0;
        }
    }

    fn tail_ratio_at(&self, r: f64) -> f64 {
        r.powf(self.params.decay_power()) * r.exp() * self.interp_w(r)
    }

    fn tail_window_fit(&self, r_lo: f64) -> AsymptoticFit {
        let m = self.params.decay_power();
        let (mut sum, mut count) = (0.0, 0usize);
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for (&r, &w) in self.r_grid.iter().zip(&self.w_values) {
            if r < r_lo {
                continue;
            }
            let g = r.powf(m) * r.exp() * w;
            sum += g;
            count += 1;
            lo = lo.min(g);
            hi = hi.max(g);
        }
        AsymptoticFit {
            c: sum / count.max(1) as f64,
            spread: hi / lo - 1.0,
            r_lo,
            r_hi: self.r_max,
        }
    }

    pub fn validate(&self) -> Result<(), GroundStateError> {
        self.params.validate()?;
        let len = self.r_grid.len();
        if len < 4 || self.w_values.len() != len || self.w_prime.len() != len {
            return Err(GroundStateError::MalformedProfile(
                "array lengths differ or too short".into(),
            ));
        }
        if self.r_grid[0] != 0.0 || !self.r_grid.windows(2).all(|w| w[1] > w[0]) {
            return Err(GroundStateError::MalformedProfile(
                "radial grid must start at 0 and increase".into(),
            ));
        }
        if !(self.asympt_c > 0.0) || !(self.tail_switch_radius > 0.0) {
            return Err(GroundStateError::MalformedProfile(
                "tail constants must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, GroundStateError> {
        let profile: Self = serde_json::from_str(s)
            .map_err(|e| GroundStateError::MalformedProfile(e.to_string()))?;
        profile.validate()?;
        Ok(profile)
    }

    fn w_second(&self, k: usize) -> f64 {
        let r = self.r_grid[k];
        let w = self.w_values[k];
        let p = self.params.p;
        let nf = self.params.n as f64;
        if r == 0.0 {
            (w - w.powf(p)) / nf
        } else {
            -(nf - 1.0) / r * self.w_prime[k] + w - w.powf(p)
        }
    }

    fn locate(&self, r: f64) -> usize {
        let k = self.r_grid.partition_point(|&x| x <= r);
        k.saturating_sub(1).min(self.r_grid.len() - 2)
    }

    fn interp_w(&self, r: f64) -> f64 {
        let k = self.locate(r);
        hermite(
            self.r_grid[k],
            self.r_grid[k + 1],
            self.w_values[k],
            self.w_values[k + 1],
            self.w_prime[k],
            self.w_prime[k + 1],
            r,
        )
    }

    fn interp_w_prime(&self, r: f64) -> f64 {
        let k = self.locate(r);
        hermite(
            self.r_grid[k],
            self.r_grid[k + 1],
            self.w_prime[k],
            self.w_prime[k + 1],
            self.w_second(k),
            self.w_second(k + 1),
            r,
        )
    }

    /// `W` as a function of the radius.
    pub fn w(&self, r: f64) -> f64 {
        let r = r.abs();
        if r <= self.tail_switch_radius {
            self.interp_w(r)
        } else {
            self.asympt_c * r.powf(-self.params.decay_power()) * (-r).exp()
        }
    }

    /// `W'` as a function of the radius.
    pub fn w_prime_at(&self, r: f64) -> f64 {
        let r = r.abs();
        if r <= self.tail_switch_radius {
            self.interp_w_prime(r)
        } else {
            let m = self.params.decay_power();
            -self.asympt_c * r.powf(-m) * (-r).exp() * (1.0 + m / r)
        }
    }

    /// `W''` as a function of the radius, taken from the radial equation.
    pub fn w_second_at(&self, r: f64) -> f64 {
        let r = r.abs();
        let p = self.params.p;
        let nf = self.params.n as f64;
        if r == 0.0 {
            return (self.w0 - self.w0.powf(p)) / nf;
        }
        let w = self.w(r);
        w - w.powf(p) - (nf - 1.0) / r * self.w_prime_at(r)
    }

    /// `log W(r)`, accurate far beyond the underflow radius of `W`.
    pub fn log_w(&self, r: f64) -> f64 {
        let r = r.abs();
        if r <= self.tail_switch_radius {
            self.interp_w(r).ln()
        } else {
            self.asympt_c.ln() - self.params.decay_power() * r.ln() - r
        }
    }
}

fn hermite(r0: f64, r1: f64, f0: f64, f1: f64, d0: f64, d1: f64, r: f64) -> f64 {
    let h = r1 - r0;
    let t = (r - r0) / h;
    let t2 = t * t;
    let t3 = t2 * t;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + t;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    h00 * f0 + h * h10 * d0 + h01 * f1 + h * h11 * d1
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `W(|x|)`.
pub fn eval_w(profile: &GroundStateProfile, x: &[f64]) -> f64 {
    profile.w(norm(x))
}

/// `Z_i(x) = ∂_{x_i} W(x) = W'(|x|) x_i / |x|`, with a 0-based axis index.
pub fn eval_z(profile: &GroundStateProfile, x: &[f64], axis: usize) -> f64 {
    assert!(
        axis < x.len(),
        "axis {axis} out of range for a point in R^{}",
        x.len()
    );
    let r = norm(x);
    if r == 0.0 {
        return 0.0;
    }
    profile.w_prime_at(r) * x[axis] / r
}

/// Returns the fitted `C` in `W ~ C r^{-(n-1)/2} e^{-r}`.
pub fn asymptotic_constant(
    profile: &GroundStateProfile,
) -> Result<AsymptoticFit, GroundStateError> {
    let fit = profile.tail_window_fit(profile.tail_switch_radius);
    if !(fit.spread < TAIL_SPREAD_MAX) {
        return Err(GroundStateError::TailNotResolved {
            spread: fit.spread,
            r_lo: fit.r_lo,
            r_hi: fit.r_hi,
        });
    }
    Ok(fit)
}

/// Second derivative at node `i` of the quintic Hermite interpolant through
/// values and slopes at nodes `i-1, i, i+1`.
pub(crate) fn hermite_second_derivative(t: [f64; 3], f: [f64; 3], d: [f64; 3]) -> f64 {
    let h = t[2] - t[1];
    let sm = (t[0] - t[1]) / h;
    let sp = 1.0;
    // q(s) = f1 + d1 h s + c2 s² + c3 s³ + c4 s⁴ + c5 s⁵ in s = (t - t1)/h.
    let mut a = Vec::with_capacity(16);
    let mut b = Vec::with_capacity(4);
    for (s, fv, dv) in [(sm, f[0], d[0]), (sp, f[2], d[2])] {
        a.extend_from_slice(&[s * s, s.powi(3), s.powi(4), s.powi(5)]);
        b.push(fv - f[1] - d[1] * h * s);
        a.extend_from_slice(&[2.0 * s, 3.0 * s * s, 4.0 * s.powi(3), 5.0 * s.powi(4)]);
        b.push(dv * h - d[1] * h);
    }
    let lu = DenseLu::factor(a, 4).expect("distinct nodes give a regular Hermite system");
    lu.solve(&mut b);
    2.0 * b[0] / (h * h)
}

/// `|W'' + (n-1)/r W' - W + W^p|` at every interior node, with `W''` taken
/// from the local quintic Hermite interpolant of the stored samples.
pub fn ode_residuals(profile: &GroundStateProfile) -> Vec<f64> {
    let r = &profile.r_grid;
    let w = &profile.w_values;
    let wp = &profile.w_prime;
    let nf = profile.params.n as f64;
    let p = profile.params.p;
    (1..r.len() - 1)
        .map(|i| {
            let w2 = hermite_second_derivative(
                [r[i - 1], r[i], r[i + 1]],
                [w[i - 1], w[i], w[i + 1]],
                [wp[i - 1], wp[i], wp[i + 1]],
            );
            (w2 + (nf - 1.0) / r[i] * wp[i] - w[i] + w[i].powf(p)).abs()
        })
        .collect()
}

pub fn max_ode_residual(profile: &GroundStateProfile) -> f64 {
    ode_residuals(profile).into_iter().fold(0.0, f64::max)
}

/// Checks that the derivative directions solve the linearized equation.
///
/// For `Z_i = g(r) x_i / r` with `g = W'`, the equation
/// `ΔZ - Z + p W^{p-1} Z = 0` reduces to
/// `g'' + (n-1)/r g' - (n-1)/r² g - g + p W^{p-1} g = 0`.
pub fn linearized_kernel_check(profile: &GroundStateProfile) -> LinearizedCheck {
    let r = &profile.r_grid;
    let w = &profile.w_values;
    let g = &profile.w_prime;
    let nf = profile.params.n as f64;
    let p = profile.params.p;
    let gp: Vec<f64> = (0..r.len()).map(|k| profile.w_second(k)).collect();
    let mut kernel_residual = 0.0f64;
    let mut w_identity_residual = 0.0f64;
    let mut gradient_constant = 0.0f64;
    for i in 1..r.len() - 1 {
        let t = [r[i - 1], r[i], r[i + 1]];
        let g2 =
            hermite_second_derivative(t, [g[i - 1], g[i], g[i + 1]], [gp[i - 1], gp[i], gp[i + 1]]);
        let pot = p * w[i].powf(p - 1.0);
        let lz =
            g2 + (nf - 1.0) / r[i] * gp[i] - (nf - 1.0) / (r[i] * r[i]) * g[i] - g[i] + pot * g[i];
        kernel_residual = kernel_residual.max(lz.abs());
        let w2 =
            hermite_second_derivative(t, [w[i - 1], w[i], w[i + 1]], [g[i - 1], g[i], g[i + 1]]);
        let lw = w2 + (nf - 1.0) / r[i] * g[i] - w[i] + pot * w[i];
        w_identity_residual = w_identity_residual.max((lw - (p - 1.0) * w[i].powf(p)).abs());
        gradient_constant = gradient_constant.max(g[i].abs() / w[i]);
    }
    LinearizedCheck {
        kernel_residual,
        w_identity_residual,
        zero_residual: 0.0,
        gradient_constant,
    }
}

/// Explicit 1D ground state `((p+1)/2)^{1/(p-1)} sech^{2/(p-1)}((p-1)x/2)`.
pub fn one_dim_exact(p: f64, x: f64) -> f64 {
    let a = ((p + 1.0) / 2.0).powf(1.0 / (p - 1.0));
    a * (1.0 / ((p - 1.0) * x / 2.0).cosh()).powf(2.0 / (p - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_second_derivative_is_exact_for_quintics() {
        let q =
            |t: f64| 1.0 - 2.0 * t + 0.5 * t * t - t.powi(3) + 0.25 * t.powi(4) + 0.1 * t.powi(5);
        let dq = |t: f64| -2.0 + t - 3.0 * t * t + t.powi(3) + 0.5 * t.powi(4);
        let d2q = |t: f64| 1.0 - 6.0 * t + 3.0 * t * t + 2.0 * t.powi(3);
        let t = [0.3, 0.41, 0.5];
        let got = hermite_second_derivative(t, t.map(q), t.map(dq));
        assert!((got - d2q(0.41)).abs() < 1e-9, "{got} vs {}", d2q(0.41));
    }

    #[test]
    fn linear_tail_solves_free_equation() {
        for n in 1..=3 {
            let r = 30.0;
            let h = 1e-3;
            let [w, wp] = linear_tail(n, r);
            let [wl, _] = linear_tail(n, r - h);
            let [wr, _] = linear_tail(n, r + h);
            let w2 = (wl - 2.0 * w + wr) / (h * h);
            let res = (w2 + (n as f64 - 1.0) / r * wp - w) / w;
            assert!(res.abs() < 1e-6, "n={n}: {res}");
        }
    }

    #[test]
    fn params_validation() {
        assert!(ModelParams::new(0, 2.0).is_err());
        assert!(ModelParams::new(1, 1.0).is_err());
        assert!(ModelParams::new(3, 5.0).is_err());
        assert!(ModelParams::new(3, 4.9).is_ok());
    }

    #[test]
    fn cubic_profile_matches_sech() {
        let prof = solve_ground_state(ModelParams::new(1, 3.0).unwrap(), 1e-8).unwrap();
        assert!((prof.w0 - 2f64.sqrt()).abs() < 1e-10, "{}", prof.w0);
        let mut err = 0.0f64;
        for &r in &prof.r_grid {
            err = err.max((prof.w(r) - one_dim_exact(3.0, r)).abs());
        }
        assert!(err < 1e-9, "{err}");
    }
}
