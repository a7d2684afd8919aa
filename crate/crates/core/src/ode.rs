//! Adaptive Dormand–Prince 5(4) integrator for small fixed-size systems.
//!
//! Integration runs forward or backward depending on the sign of
//! `t_end - t0`. The observer sees every accepted step and may stop the run
//! early, which is how the shooting solver detects zero crossings.

#[derive(Debug, Clone, Copy)]
pub struct StepperOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for StepperOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-12,
            atol: 1e-300,
            h_init: 1e-3,
            h_max: 0.01,
            max_steps: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    ReachedEnd,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OdeError {
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("step budget of {0} exhausted")]
    TooManySteps(usize),
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
}

// Dormand–Prince tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn axpy<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for (c, k) in terms {
        for i in 0..N {
            out[i] += h * c * k[i];
        }
    }
    out
}

/// Integrates `y' = f(t, y)` from `t0` to `t_end`.
///
/// The error of each step is measured against
/// `atol + rtol * max_i |y_i|`, i.e. relative to the size of the whole state,
/// which keeps steps meaningful for exponentially decaying solutions.
pub fn integrate<const N: usize, F, S>(
    f: F,
    t0: f64,
    y0: [f64; N],
    t_end: f64,
    opts: &StepperOptions,
    mut observer: S,
) -> Result<Termination, OdeError>
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
    S: FnMut(f64, &[f64; N]) -> Control,
{
    let dir = if t_end >= t0 { 1.0 } else { -1.0 };
    let mut t = t0;
    let mut y = y0;
    let mut h = opts.h_init.min(opts.h_max).min((t_end - t0).abs());
    if h == 0.0 {
        return Ok(Termination::ReachedEnd);
    }
    let mut k1 = f(t, &y);
    let mut steps = 0usize;
    loop {
        if steps >= opts.max_steps {
            return Err(OdeError::TooManySteps(opts.max_steps));
        }
        let remaining = (t_end - t) * dir;
        if remaining <= 1e-14 * t_end.abs().max(1.0) {
            return Ok(Termination::ReachedEnd);
        }
        // Stretch the final step slightly rather than leave a sliver.
        let last = h * (1.0 + 1e-6) >= remaining;
        let hs = if last { remaining } else { h };
        let hd = hs * dir;

        let k2 = f(t + C2 * hd, &axpy(&y, hd, &[(A21, &k1)]));
        let k3 = f(t + C3 * hd, &axpy(&y, hd, &[(A31, &k1), (A32, &k2)]));
        let k4 = f(
            t + C4 * hd,
            &axpy(&y, hd, &[(A41, &k1), (A42, &k2), (A43, &k3)]),
        );
        let k5 = f(
            t + C5 * hd,
            &axpy(&y, hd, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
        );
        let k6 = f(
            t + hd,
            &axpy(
                &y,
                hd,
                &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
            ),
        );
        let y_new = axpy(
            &y,
            hd,
            &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)],
        );
        let k7 = f(t + hd, &y_new);

        let scale_base = y
            .iter()
            .chain(y_new.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let sc = opts.atol + opts.rtol * scale_base;
        let mut err = 0.0f64;
        for i in 0..N {
            let e =
                hd * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            err = err.max((e / sc).abs());
        }
        if !err.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
            if hs < 1e-14 {
                return Err(OdeError::NonFinite { t });
            }
            h = 0.25 * hs;
            continue;
        }
        if err <= 1.0 {
            steps += 1;
            t = if last { t_end } else { t + hd };
            y = y_new;
            k1 = k7;
            if observer(t, &y) == Control::Stop {
                return Ok(Termination::Stopped);
            }
            let grow = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            h = (hs * grow).min(opts.h_max);
        } else {
            let shrink = (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
            h = hs * shrink;
            if h < 1e-14 * t.abs().max(1.0) {
                return Err(OdeError::StepUnderflow { t });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_oscillator_round_trip() {
        let opts = StepperOptions {
            rtol: 1e-12,
            h_max: 0.05,
            ..Default::default()
        };
        let mut last = [0.0; 2];
        integrate(
            |_, y: &[f64; 2]| [y[1], -y[0]],
            0.0,
            [1.0, 0.0],
            10.0,
            &opts,
            |_, y| {
                last = *y;
                Control::Continue
            },
        )
        .unwrap();
        assert!((last[0] - 10f64.cos()).abs() < 1e-10);
        assert!((last[1] + 10f64.sin()).abs() < 1e-10);
    }

    #[test]
    fn backward_integration_of_decaying_mode() {
        // y'' = y with y(5) = e^-5, y'(5) = -e^-5, integrated back to 0.
        let opts = StepperOptions::default();
        let mut last = (0.0, [0.0; 2]);
        let e5 = (-5f64).exp();
        integrate(
            |_, y: &[f64; 2]| [y[1], y[0]],
            5.0,
            [e5, -e5],
            0.0,
            &opts,
            |t, y| {
                last = (t, *y);
                Control::Continue
            },
        )
        .unwrap();
        assert_eq!(last.0, 0.0);
        assert!((last.1[0] - 1.0).abs() < 1e-11);
    }

    #[test]
    fn observer_can_stop() {
        let opts = StepperOptions::default();
        let term = integrate(
            |_, _y: &[f64; 1]| [1.0],
            0.0,
            [0.0],
            10.0,
            &opts,
            |_, y| {
                if y[0] > 1.0 {
                    Control::Stop
                } else {
                    Control::Continue
                }
            },
        )
        .unwrap();
        assert_eq!(term, Termination::Stopped);
    }
}
