//! Bump-center configurations and their balance data.
//!
//! Every center interacts with the others through `κ(d)`; on a torus the
//! periodic images are enumerated explicitly (a center may see its own
//! images). Weights are formed in log space so separations far beyond the
//! underflow range of `e^{-d}` are handled exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernels::log_kappa;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParticleError {
    #[error("points {0} and {1} coincide")]
    DegenerateConfig(usize, usize),
    #[error("configuration needs at least {0} points")]
    TooFewPoints(usize),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("relaxation step must be positive (got {0})")]
    InvalidStep(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Geometry {
    FreeSpace,
    Torus { periods: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub n: usize,
    pub geometry: Geometry,
    pub points: Vec<Vec<f64>>,
}

/// Pairs whose `ln κ` falls this far below `ln κ(D_α)` are ignored.
pub const LOG_WEIGHT_CUTOFF: f64 = 40.0;

impl Configuration {
    pub fn free(n: usize, points: Vec<Vec<f64>>) -> Result<Self, ParticleError> {
        let c = Self {
            n,
            geometry: Geometry::FreeSpace,
            points,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn torus(periods: Vec<f64>, points: Vec<Vec<f64>>) -> Result<Self, ParticleError> {
        let c = Self {
            n: periods.len(),
            geometry: Geometry::Torus { periods },
            points,
        };
        c.validate()?;
        Ok(c)
    }

    /// Points on a 1D torus of the given period.
    pub fn ring(period: f64, xs: &[f64]) -> Result<Self, ParticleError> {
        Self::torus(vec![period], xs.iter().map(|&x| vec![x]).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<(), ParticleError> {
        if self.n == 0 {
            return Err(ParticleError::Invalid("dimension must be positive".into()));
        }
        if let Geometry::Torus { periods } = &self.geometry {
            if periods.len() != self.n {
                return Err(ParticleError::Invalid(format!(
                    "{} periods for dimension {}",
                    periods.len(),
                    self.n
                )));
            }
            if periods.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
                return Err(ParticleError::Invalid(
                    "torus periods must be positive".into(),
                ));
            }
        }
        for (k, p) in self.points.iter().enumerate() {
            if p.len() != self.n {
                return Err(ParticleError::Invalid(format!(
                    "point {k} has {} coordinates, expected {}",
                    p.len(),
                    self.n
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(ParticleError::Invalid(format!("point {k} is not finite")));
            }
        }
        Ok(())
    }

    pub fn periods(&self) -> Option<&[f64]> {
        match &self.geometry {
            Geometry::FreeSpace => None,
            Geometry::Torus { periods } => Some(periods),
        }
    }

    /// Wraps torus coordinates into `[0, L)`; free-space points are untouched.
    pub fn wrapped(&self) -> Self {
        let mut out = self.clone();
        if let Some(periods) = self.periods() {
            for p in &mut out.points {
                for (x, &l) in p.iter_mut().zip(periods) {
                    *x = x.rem_euclid(l);
                    if *x >= l {
                        *x = 0.0;
                    }
                }
            }
        }
        out
    }

    fn displacement(&self, from: usize, to: usize, image: &[i64]) -> Vec<f64> {
        let a = &self.points[from];
        let b = &self.points[to];
        match self.periods() {
            None => b.iter().zip(a).map(|(x, y)| x - y).collect(),
            Some(periods) => (0..self.n)
                .map(|i| b[i] + image[i] as f64 * periods[i] - a[i])
                .collect(),
        }
    }

    /// Minimum-image distance between two points.
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let base = self.wrapped();
        let mut best = f64::INFINITY;
        for_each_image(self.n, self.periods().map(|_| 1), |image| {
            if a == b && image.iter().all(|&k| k == 0) {
                return;
            }
            let d = norm(&base.displacement(a, b, image));
            best = best.min(d);
        });
        best
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Calls `f` for every image offset with `|k_i| ≤ reach_i`; free space has
/// only the zero offset.
fn for_each_image<F: FnMut(&[i64])>(n: usize, reach: Option<i64>, mut f: F) {
    let r = reach.unwrap_or(0);
    let mut image = vec![-r; n];
    loop {
        f(&image);
        let mut axis = 0;
        loop {
            if axis == n {
                return;
            }
            image[axis] += 1;
            if image[axis] <= r {
                break;
            }
            image[axis] = -r;
            axis += 1;
        }
    }
}

/// One interaction partner of a center: target index, periodic image,
/// displacement from the center and its length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborRef {
    pub index: usize,
    pub image: Vec<i64>,
    pub displacement: Vec<f64>,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    #[serde(rename = "D_alpha")]
    pub d_alpha: Vec<f64>,
    #[serde(rename = "D")]
    pub d_min: f64,
    #[serde(rename = "C0_measured")]
    pub c0_measured: f64,
}

/// Every partner of every point within `ln κ(d) ≥ ln κ(D_α) - 40`, together
/// with `D_α`.
struct Partners {
    d_alpha: Vec<f64>,
    lists: Vec<Vec<NeighborRef>>,
}

fn partners(config: &Configuration) -> Result<Partners, ParticleError> {
    config.validate()?;
    let m = config.len();
    let torus = config.periods().is_some();
    if m < 2 && !(torus && m == 1) {
        return Err(ParticleError::TooFewPoints(2));
    }
    let base = config.wrapped();
    let scale = base
        .points
        .iter()
        .flatten()
        .fold(1.0f64, |s, v| s.max(v.abs()));
    let n = config.n;

    let d_alpha: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|a| {
            let mut best = (f64::INFINITY, 0usize);
            for b in 0..m {
                for_each_image(n, torus.then_some(1), |image| {
                    if a == b && image.iter().all(|&k| k == 0) {
                        return;
                    }
                    let d = norm(&base.displacement(a, b, image));
                    if d < best.0 {
                        best = (d, b);
                    }
                });
            }
            best
        })
        .collect::<Vec<_>>()
        .into_iter()
        .enumerate()
        .map(|(a, (d, b))| {
            if d <= 1e-12 * scale {
                Err(ParticleError::DegenerateConfig(a.min(b), a.max(b)))
            } else {
                Ok(d)
            }
        })
        .collect::<Result<_, _>>()?;

    let lists: Vec<Vec<NeighborRef>> = (0..m)
        .into_par_iter()
        .map(|a| {
            let da = d_alpha[a];
            let lk_a = log_kappa(da, n).expect("positive separation");
            // ln κ is decreasing for d ≥ D_α, so d ≤ D_α + 40 + slack covers the cutoff.
            let radius = da + LOG_WEIGHT_CUTOFF + 1.0;
            let reach = base.periods().map(|ps| {
                ps.iter()
                    .map(|&l| (radius / l).ceil() as i64 + 1)
                    .max()
                    .unwrap_or(1)
            });
            let mut out = Vec::new();
            for b in 0..m {
                for_each_image(n, reach, |image| {
                    if a == b && image.iter().all(|&k| k == 0) {
                        return;
                    }
                    let disp = base.displacement(a, b, image);
                    let d = norm(&disp);
                    if d > radius {
                        return;
                    }
                    let lk = log_kappa(d, n).expect("positive separation");
                    if lk - lk_a < -LOG_WEIGHT_CUTOFF {
                        return;
                    }
                    out.push(NeighborRef {
                        index: b,
                        image: image.to_vec(),
                        displacement: disp,
                        distance: d,
                    });
                });
            }
            out
        })
        .collect();
    Ok(Partners { d_alpha, lists })
}

/// Every interaction partner of every point (periodic images included) that
/// survives the log-weight cutoff.
pub fn partner_lists(config: &Configuration) -> Result<Vec<Vec<NeighborRef>>, ParticleError> {
    Ok(partners(config)?.lists)
}

/// Nearest-neighbor distances `D_α`, `D = min D_α` and `C_0 = max D_α / min D_β`.
pub fn distances(config: &Configuration) -> Result<DistanceReport, ParticleError> {
    let d_alpha = partners_d_alpha(config)?;
    let d_min = d_alpha.iter().cloned().fold(f64::INFINITY, f64::min);
    let d_max = d_alpha.iter().cloned().fold(0.0, f64::max);
    Ok(DistanceReport {
        d_alpha,
        d_min,
        c0_measured: d_max / d_min,
    })
}

fn partners_d_alpha(config: &Configuration) -> Result<Vec<f64>, ParticleError> {
    Ok(partners(config)?.d_alpha)
}

/// `N_α`: partners at distance `≤ (1 + rel_tol) D_α`.
pub fn nearest_sets(
    config: &Configuration,
    rel_tol: f64,
) -> Result<Vec<Vec<NeighborRef>>, ParticleError> {
    let p = partners(config)?;
    Ok(nearest_from(&p, rel_tol))
}

fn nearest_from(p: &Partners, rel_tol: f64) -> Vec<Vec<NeighborRef>> {
    p.lists
        .iter()
        .zip(&p.d_alpha)
        .map(|(list, &da)| {
            list.iter()
                .filter(|nb| nb.distance <= (1.0 + rel_tol) * da)
                .cloned()
                .collect()
        })
        .collect()
}

pub const DEFAULT_NEAREST_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub index: usize,
    pub image: Vec<i64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    /// Indices in `N_α` (an index repeats when several images are nearest).
    pub neighbor_sets: Vec<Vec<usize>>,
    pub kappa_alpha: Vec<f64>,
    pub log_kappa_alpha: Vec<f64>,
    /// `ℓ_αβ` over `N_α`, normalized to sum to one.
    pub weights: Vec<Vec<WeightEntry>>,
    /// `r_α = Σ_β ℓ̂_αβ ê_αβ` with `ℓ̂` normalized over all partners.
    pub residuals: Vec<Vec<f64>>,
    pub residual_norms: Vec<f64>,
}

impl BalanceReport {
    pub fn max_residual(&self) -> f64 {
        self.residual_norms.iter().cloned().fold(0.0, f64::max)
    }
}

fn logsumexp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Balance data of the configuration with kernel `κ` in dimension `n`.
pub fn balance_residual(config: &Configuration, n: usize) -> Result<BalanceReport, ParticleError> {
    let p = partners(config)?;
    Ok(balance_from(config, &p, n))
}

fn balance_from(config: &Configuration, p: &Partners, n: usize) -> BalanceReport {
    let nearest = nearest_from(p, DEFAULT_NEAREST_TOL);
    let dim = config.n;
    let per_point: Vec<(Vec<f64>, Vec<WeightEntry>)> = p
        .lists
        .par_iter()
        .zip(nearest.par_iter())
        .map(|(list, near)| {
            let logs: Vec<f64> = list
                .iter()
                .map(|nb| log_kappa(nb.distance, n).unwrap())
                .collect();
            let lse = logsumexp(&logs);
            let mut r = vec![0.0; dim];
            for (nb, lk) in list.iter().zip(&logs) {
                let w = (lk - lse).exp();
                for i in 0..dim {
                    r[i] += w * nb.displacement[i] / nb.distance;
                }
            }
            let near_logs: Vec<f64> = near
                .iter()
                .map(|nb| log_kappa(nb.distance, n).unwrap())
                .collect();
            let near_lse = logsumexp(&near_logs);
            let weights = near
                .iter()
                .zip(&near_logs)
                .map(|(nb, lk)| WeightEntry {
                    index: nb.index,
                    image: nb.image.clone(),
                    weight: (lk - near_lse).exp(),
                })
                .collect();
            (r, weights)
        })
        .collect();
    let log_kappa_alpha: Vec<f64> = p
        .d_alpha
        .iter()
        .map(|&d| log_kappa(d, n).unwrap())
        .collect();
    let mut residuals = Vec::with_capacity(per_point.len());
    let mut weights = Vec::with_capacity(per_point.len());
    for (r, w) in per_point {
        residuals.push(r);
        weights.push(w);
    }
    BalanceReport {
        neighbor_sets: nearest
            .iter()
            .map(|s| s.iter().map(|nb| nb.index).collect())
            .collect(),
        kappa_alpha: log_kappa_alpha.iter().map(|l| l.exp()).collect(),
        log_kappa_alpha,
        weights,
        residual_norms: residuals.iter().map(|r| norm(r)).collect(),
        residuals,
    }
}

/// `ln E` for `E = Σ_{α<β} κ(d_αβ)` (periodic images included on a torus).
pub fn energy_logsum(config: &Configuration, n: usize) -> Result<f64, ParticleError> {
    let p = partners(config)?;
    Ok(energy_from(&p, n))
}

fn energy_from(p: &Partners, n: usize) -> f64 {
    let logs: Vec<f64> = p
        .lists
        .iter()
        .flatten()
        .map(|nb| log_kappa(nb.distance, n).unwrap())
        .collect();
    // Each unordered pair appears twice.
    logsumexp(&logs) - std::f64::consts::LN_2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelaxOptions {
    pub step: f64,
    pub max_iters: usize,
    pub residual_tol: f64,
    /// Iterations without improving the best residual before giving up.
    pub stall_window: usize,
}

impl Default for RelaxOptions {
    fn default() -> Self {
        Self {
            step: 0.5,
            max_iters: 20_000,
            residual_tol: 1e-10,
            stall_window: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub max_residual: f64,
    pub energy_logsum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelaxStatus {
    Converged,
    /// The residual stopped improving for `stall_window` iterations.
    Stalled,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxOutcome {
    pub config: Configuration,
    pub status: RelaxStatus,
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
}

/// Repulsive descent `ξ_α ← ξ_α - step·r_α` on the normalized residuals.
///
/// `r_α` points toward the dominant neighbors, so moving against it lowers
/// the interaction energy. A trial step is halved (up to 30 times) until the
/// energy does not increase.
pub fn relax(config: &Configuration, opts: &RelaxOptions) -> Result<RelaxOutcome, ParticleError> {
    if !(opts.step > 0.0) {
        return Err(ParticleError::InvalidStep(opts.step));
    }
    let n = config.n;
    let mut current = config.clone();
    let mut parts = partners(&current)?;
    let mut report = balance_from(&current, &parts, n);
    let mut energy = energy_from(&parts, n);
    let mut trace = vec![TraceRow {
        iter: 0,
        max_residual: report.max_residual(),
        energy_logsum: energy,
    }];
    let mut best = report.max_residual();
    let mut since_best = 0usize;
    for iter in 1..=opts.max_iters {
        if report.max_residual() < opts.residual_tol {
            return Ok(RelaxOutcome {
                config: current,
                status: RelaxStatus::Converged,
                iterations: iter - 1,
                trace,
            });
        }
        let mut lambda = opts.step;
        let mut accepted = None;
        for _ in 0..30 {
            let mut trial = current.clone();
            for (pt, r) in trial.points.iter_mut().zip(&report.residuals) {
                for (x, ri) in pt.iter_mut().zip(r) {
                    *x -= lambda * ri;
                }
            }
            let trial = trial.wrapped();
            if let Ok(tp) = partners(&trial) {
                let e = energy_from(&tp, n);
                if e <= energy + 1e-13 * energy.abs().max(1.0) {
                    accepted = Some((trial, tp, e));
                    break;
                }
            }
            lambda *= 0.5;
        }
        let Some((trial, tp, e)) = accepted else {
            return Ok(RelaxOutcome {
                config: current,
                status: RelaxStatus::Stalled,
                iterations: iter - 1,
                trace,
            });
        };
        current = trial;
        parts = tp;
        energy = e;
        report = balance_from(&current, &parts, n);
        let res = report.max_residual();
        trace.push(TraceRow {
            iter,
            max_residual: res,
            energy_logsum: energy,
        });
        if res < best * (1.0 - 1e-12) {
            best = res;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opts.stall_window {
                return Ok(RelaxOutcome {
                    config: current,
                    status: RelaxStatus::Stalled,
                    iterations: iter,
                    trace,
                });
            }
        }
    }
    let status = if report.max_residual() < opts.residual_tol {
        RelaxStatus::Converged
    } else {
        RelaxStatus::MaxIterations
    };
    Ok(RelaxOutcome {
        config: current,
        status,
        iterations: opts.max_iters,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheck {
    pub tol: f64,
    pub passes: Vec<bool>,
    pub residual_norms: Vec<f64>,
    pub weights: Vec<Vec<WeightEntry>>,
}

impl TheoremCheck {
    pub fn all_pass(&self) -> bool {
        self.passes.iter().all(|&b| b)
    }
}

/// Per-point check `|r_α| < tol` of the balance law.
pub fn verify_theorem(config: &Configuration, tol: f64) -> Result<TheoremCheck, ParticleError> {
    let report = balance_residual(config, config.n)?;
    Ok(TheoremCheck {
        tol,
        passes: report.residual_norms.iter().map(|&r| r < tol).collect(),
        residual_norms: report.residual_norms,
        weights: report.weights,
    })
}

/// Square lattice with `k` points per side on a torus of side `k·spacing`.
pub fn square_lattice(k: usize, spacing: f64) -> Configuration {
    let mut pts = Vec::new();
    for i in 0..k {
        for j in 0..k {
            pts.push(vec![i as f64 * spacing, j as f64 * spacing]);
        }
    }
    Configuration {
        n: 2,
        geometry: Geometry::Torus {
            periods: vec![k as f64 * spacing; 2],
        },
        points: pts,
    }
}

/// Triangular lattice with `kx × ky` points (`ky` even) on a commensurate torus.
pub fn triangular_lattice(kx: usize, ky: usize, spacing: f64) -> Configuration {
    assert!(
        ky.is_multiple_of(2),
        "triangular lattice needs an even number of rows"
    );
    let row = spacing * 3f64.sqrt() / 2.0;
    let mut pts = Vec::new();
    for j in 0..ky {
        for i in 0..kx {
            let shift = if j % 2 == 1 { 0.5 * spacing } else { 0.0 };
            pts.push(vec![i as f64 * spacing + shift, j as f64 * row]);
        }
    }
    Configuration {
        n: 2,
        geometry: Geometry::Torus {
            periods: vec![kx as f64 * spacing, ky as f64 * row],
        },
        points: pts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_enumeration_counts() {
        let mut count = 0;
        for_each_image(2, Some(1), |_| count += 1);
        assert_eq!(count, 9);
        let mut count = 0;
        for_each_image(3, None, |_| count += 1);
        assert_eq!(count, 1);
    }

    #[test]
    fn logsumexp_is_stable() {
        let v = [-1000.0, -1000.0];
        assert!((logsumexp(&v) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn single_point_on_ring_sees_its_images() {
        let c = Configuration::ring(10.0, &[3.0]).unwrap();
        let d = distances(&c).unwrap();
        assert!((d.d_alpha[0] - 10.0).abs() < 1e-12);
        let b = balance_residual(&c, 1).unwrap();
        assert!(b.residual_norms[0] < 1e-15);
        assert_eq!(b.neighbor_sets[0], vec![0, 0]);
    }
}
