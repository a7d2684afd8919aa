//! Lyapunov–Schmidt side of the multi-bump problem.
//!
//! Splits a solution into `Σ_α W(x - ξ_α) + φ` with `φ` orthogonal to the
//! localized kernel directions `η_K Z_i`, evaluates the interaction term
//! `I = (Σ W_α)^p - Σ W_α^p` and its projection on `∇W_α`, solves the
//! projected linearized problem around a single bump, and measures the decay
//! of `φ` against the predicted rates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ground_state::GroundStateProfile;
use crate::kernels::{kappa, log_kappa};
use crate::linalg::{self, BandedMatrix, DenseLu, KrylovOptions, LinalgError};
use crate::particles::{self, Configuration, Geometry, ParticleError};
use crate::pde::{BoundaryCondition, DiscreteField, GridSpec};
use crate::quadrature::CompositeRule;

#[derive(Debug, thiserror::Error)]
pub enum ReductionError {
    #[error("invalid reduction parameters: {0}")]
    InvalidParams(String),
    #[error("orthogonality Jacobian is singular (pivot ratio {pivot_ratio:e}); bumps overlap")]
    ProjectionSingular { pivot_ratio: f64 },
    #[error("orthogonality Newton stalled at residual {residual:e} after {iterations} iterations")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("projected saddle system could not be solved: {0}")]
    SaddleSingular(LinalgError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Particles(#[from] ParticleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReductionParams {
    /// Cutoff radius of `η_K`.
    #[serde(rename = "K")]
    pub k: f64,
    /// Outer-boundary radius.
    #[serde(rename = "L")]
    pub l: f64,
    /// Weighted-norm rate.
    pub delta: f64,
    /// Decay margin; only used for reporting.
    pub tau: f64,
}

impl Default for ReductionParams {
    fn default() -> Self {
        Self {
            k: 20.0,
            l: 3.0,
            delta: 0.2,
            tau: 0.1,
        }
    }
}

impl ReductionParams {
    pub fn validate(&self) -> Result<(), ReductionError> {
        if !(self.l > 0.0 && 3.0 * self.l < self.k / 2.0) {
            return Err(ReductionError::InvalidParams(format!(
                "need 0 < 3L < K/2 (L = {}, K = {})",
                self.l, self.k
            )));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(ReductionError::InvalidParams(format!(
                "tau = {} not in (0, 1)",
                self.tau
            )));
        }
        if !(self.delta > 0.0 && self.delta < (1.0 - self.tau) / 3.0) {
            return Err(ReductionError::InvalidParams(format!(
                "need 0 < delta < (1 - tau)/3 (delta = {}, tau = {})",
                self.delta, self.tau
            )));
        }
        Ok(())
    }

    /// Whether `τ < min(2 - p, (p - 1)/C_0)`.
    pub fn tau_admissible(&self, p: f64, c0: f64) -> bool {
        self.tau < (2.0 - p).min((p - 1.0) / c0)
    }
}

/// Quintic cutoff: 1 on `[0, 1]`, 0 beyond 2, `C²` at both joins.
pub fn eta(r: f64) -> f64 {
    if r <= 1.0 {
        1.0
    } else if r >= 2.0 {
        0.0
    } else {
        let t = r - 1.0;
        1.0 - t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
    }
}

pub fn eta_prime(r: f64) -> f64 {
    if r <= 1.0 || r >= 2.0 {
        0.0
    } else {
        let t = r - 1.0;
        -30.0 * t * t * (1.0 - t) * (1.0 - t)
    }
}

/// Bumps farther than this contribute nothing representable.
const IMAGE_CUTOFF: f64 = 80.0;

/// Calls `f` with every displacement `x - c - kL` of length at most `radius`
/// (a single displacement in free space).
fn for_each_displacement<F: FnMut(&[f64])>(
    geometry: &Geometry,
    x: &[f64],
    c: &[f64],
    radius: f64,
    mut f: F,
) {
    let n = x.len();
    match geometry {
        Geometry::FreeSpace => {
            let d: Vec<f64> = (0..n).map(|a| x[a] - c[a]).collect();
            if norm(&d) <= radius {
                f(&d);
            }
        }
        Geometry::Torus { periods } => {
            let base: Vec<f64> = (0..n)
                .map(|a| {
                    let d = x[a] - c[a];
                    d - periods[a] * (d / periods[a]).round()
                })
                .collect();
            let reach: Vec<i64> = periods
                .iter()
                .map(|l| (radius / l).ceil() as i64 + 1)
                .collect();
            let mut k = reach.iter().map(|r| -r).collect::<Vec<_>>();
            let mut d = vec![0.0; n];
            loop {
                for a in 0..n {
                    d[a] = base[a] + k[a] as f64 * periods[a];
                }
                if norm(&d) <= radius {
                    f(&d);
                }
                let mut axis = 0;
                loop {
                    if axis == n {
                        return;
                    }
                    k[axis] += 1;
                    if k[axis] <= reach[axis] {
                        break;
                    }
                    k[axis] = -reach[axis];
                    axis += 1;
                }
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `∂_j ∂_i W` at displacement `d`.
fn hessian_w(profile: &GroundStateProfile, d: &[f64], i: usize, j: usize) -> f64 {
    let r = norm(d);
    if r == 0.0 {
        return if i == j {
            profile.w_second_at(0.0)
        } else {
            0.0
        };
    }
    let w1 = profile.w_prime_at(r);
    let w2 = profile.w_second_at(r);
    let (ui, uj) = (d[i] / r, d[j] / r);
    let kron = if i == j { 1.0 } else { 0.0 };
    w2 * ui * uj + w1 / r * (kron - ui * uj)
}

/// Nearest-center labels of the grid nodes; ties go to the lower index.
pub fn voronoi_labels(grid: &GridSpec, centers: &Configuration) -> Vec<usize> {
    let geometry = grid.geometry();
    (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let x = grid.node(k);
            let mut best = (f64::INFINITY, 0usize);
            for (a, c) in centers.points.iter().enumerate() {
                let d = match &geometry {
                    Geometry::FreeSpace => {
                        norm(&(0..grid.n).map(|i| x[i] - c[i]).collect::<Vec<_>>())
                    }
                    Geometry::Torus { .. } => norm(&grid.displacement(&x, c)),
                };
                if d < best.0 {
                    best = (d, a);
                }
            }
            best.1
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellNorm {
    pub sup_phi: f64,
    pub sup_grad_phi: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionResult {
    pub centers: Configuration,
    pub phi: DiscreteField,
    /// `∫ φ η_K(x - ξ_α) Z_i(x - ξ_α)` per center and axis.
    pub orth_residuals: Vec<Vec<f64>>,
    /// Discrete `‖Z_1‖²`, the natural scale of the residuals.
    pub z_norm_sq: f64,
    pub cell_norms: Vec<CellNorm>,
    pub iterations: usize,
}

impl ReductionResult {
    pub fn max_orth_residual(&self) -> f64 {
        self.orth_residuals
            .iter()
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `Σ_β W(x - ξ_β)` over all centers and images.
fn bump_sum(
    profile: &GroundStateProfile,
    geometry: &Geometry,
    centers: &[Vec<f64>],
    x: &[f64],
) -> f64 {
    let mut s = 0.0;
    for c in centers {
        for_each_displacement(geometry, x, c, IMAGE_CUTOFF, |d| s += profile.w(norm(d)));
    }
    s
}

fn wrap_centers(geometry: &Geometry, centers: &mut [Vec<f64>]) {
    if let Geometry::Torus { periods } = geometry {
        for c in centers.iter_mut() {
            for (x, l) in c.iter_mut().zip(periods) {
                *x = x.rem_euclid(*l);
            }
        }
    }
}

const NODE_CHUNK: usize = 512;

/// Orthogonality residuals and their Jacobian with respect to the centers.
fn orthogonality_system(
    u: &DiscreteField,
    profile: &GroundStateProfile,
    centers: &[Vec<f64>],
    k_cut: f64,
    with_jacobian: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let grid = &u.grid;
    let geometry = grid.geometry();
    let n = grid.n;
    let m = centers.len();
    let dim = n * m;
    let support = 2.0 * k_cut;
    let vol = grid.h.powi(n as i32);
    let nodes: Vec<usize> = (0..grid.len()).filter(|&k| grid.is_interior(k)).collect();
    let partials: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = nodes
        .par_chunks(NODE_CHUNK)
        .map(|chunk| {
            let mut f = vec![0.0; dim];
            let mut jac = vec![0.0; if with_jacobian { dim * dim } else { 0 }];
            let mut phi_vals = Vec::with_capacity(chunk.len());
            let mut psi = vec![0.0; dim];
            let mut dpsi = vec![0.0; if with_jacobian { dim * n } else { 0 }];
            let mut zt = vec![0.0; dim];
            for &node in chunk {
                let x = grid.node(node);
                let phi = u.values[node] - bump_sum(profile, &geometry, centers, &x);
                phi_vals.push(phi);
                psi.iter_mut().for_each(|v| *v = 0.0);
                dpsi.iter_mut().for_each(|v| *v = 0.0);
                zt.iter_mut().for_each(|v| *v = 0.0);
                for (a, c) in centers.iter().enumerate() {
                    for_each_displacement(&geometry, &x, c, support, |d| {
                        let r = norm(d);
                        let e = eta(r / k_cut);
                        let ep = eta_prime(r / k_cut) / k_cut;
                        let wp = profile.w_prime_at(r);
                        for i in 0..n {
                            let zi = if r > 0.0 { wp * d[i] / r } else { 0.0 };
                            psi[a * n + i] += e * zi;
                            if with_jacobian {
                                for j in 0..n {
                                    let de = if r > 0.0 { ep * d[j] / r } else { 0.0 };
                                    dpsi[(a * n + i) * n + j] +=
                                        de * zi + e * hessian_w(profile, d, i, j);
                                }
                            }
                        }
                    });
                    if with_jacobian {
                        for_each_displacement(&geometry, &x, c, IMAGE_CUTOFF, |d| {
                            let r = norm(d);
                            if r > 0.0 {
                                let wp = profile.w_prime_at(r);
                                for j in 0..n {
                                    zt[a * n + j] += wp * d[j] / r;
                                }
                            }
                        });
                    }
                }
                for q in 0..dim {
                    f[q] += vol * phi * psi[q];
                }
                if with_jacobian {
                    // ∂φ/∂ξ_{β,j} = Z_j(x - ξ_β); ∂ψ_{α,i}/∂ξ_{α,j} = -∂_j ψ_{α,i}.
                    for q in 0..dim {
                        for s in 0..dim {
                            jac[q * dim + s] += vol * zt[s] * psi[q];
                        }
                        let a = q / n;
                        for j in 0..n {
                            jac[q * dim + a * n + j] -= vol * phi * dpsi[q * n + j];
                        }
                    }
                }
            }
            (f, jac, phi_vals)
        })
        .collect();
    let mut f = vec![0.0; dim];
    let mut jac = vec![0.0; if with_jacobian { dim * dim } else { 0 }];
    let mut phi_full = vec![0.0; grid.len()];
    let mut idx = 0;
    for (pf, pj, pv) in partials {
        for q in 0..dim {
            f[q] += pf[q];
        }
        for q in 0..jac.len() {
            jac[q] += pj[q];
        }
        for v in pv {
            phi_full[nodes[idx]] = v;
            idx += 1;
        }
    }
    (f, jac, phi_full)
}

fn z_norm_sq(profile: &GroundStateProfile, grid: &GridSpec) -> f64 {
    // ‖Z_1‖² of a bump centered in the cell, sampled with the grid spacing.
    let n = grid.n;
    let h = grid.h;
    let reach = (IMAGE_CUTOFF / h).ceil() as i64;
    let vol = h.powi(n as i32);
    let mut s = 0.0;
    if n == 1 {
        for i in -reach..=reach {
            let x = i as f64 * h;
            s += profile.w_prime_at(x).powi(2);
        }
    } else {
        let reach = (40.0 / h).ceil() as i64;
        for i in -reach..=reach {
            for j in -reach..=reach {
                let (x, y) = (i as f64 * h, j as f64 * h);
                let r = x.hypot(y);
                if r > 0.0 {
                    s += (profile.w_prime_at(r) * x / r).powi(2);
                }
            }
        }
    }
    s * vol
}

/// Newton iteration on the orthogonality conditions for the centers.
pub fn orthogonal_decompose(
    u: &DiscreteField,
    profile: &GroundStateProfile,
    initial_centers: &Configuration,
    params: &ReductionParams,
) -> Result<ReductionResult, ReductionError> {
    params.validate()?;
    let grid = &u.grid;
    if initial_centers.n != grid.n || profile.params.n != grid.n {
        return Err(ReductionError::DimensionMismatch(format!(
            "grid {}D, centers {}D, profile {}D",
            grid.n, initial_centers.n, profile.params.n
        )));
    }
    let geometry = grid.geometry();
    let n = grid.n;
    let mut centers = initial_centers.points.clone();
    wrap_centers(&geometry, &mut centers);
    let zsq = z_norm_sq(profile, grid);
    let tol = 1e-13 * zsq;
    let dim = n * centers.len();
    let mut iterations = 0;
    const MAX_ITERS: usize = 50;
    let (f_final, phi_full) = loop {
        let (f, jac, phi) = orthogonality_system(u, profile, &centers, params.k, true);
        let res = linalg::norm_inf(&f);
        if res <= tol || dim == 0 {
            break (f, phi);
        }
        if iterations >= MAX_ITERS {
            return Err(ReductionError::NoConvergence {
                iterations,
                residual: res,
            });
        }
        let lu = DenseLu::factor(jac, dim)
            .map_err(|_| ReductionError::ProjectionSingular { pivot_ratio: 0.0 })?;
        if lu.pivot_ratio() < 1e-12 {
            return Err(ReductionError::ProjectionSingular {
                pivot_ratio: lu.pivot_ratio(),
            });
        }
        let mut step = f.clone();
        lu.solve(&mut step);
        iterations += 1;
        let move_size = linalg::norm_inf(&step);
        for (a, c) in centers.iter_mut().enumerate() {
            for i in 0..n {
                c[i] -= step[a * n + i];
            }
        }
        wrap_centers(&geometry, &mut centers);
        if move_size < 1e-14 {
            // Moves at the rounding level: accept what the last step achieved.
            let (f, _, phi) = orthogonality_system(u, profile, &centers, params.k, false);
            break (f, phi);
        }
    };
    let orth_residuals = f_final.chunks(n.max(1)).map(|c| c.to_vec()).collect();
    let centers_cfg = Configuration {
        n,
        geometry: initial_centers.geometry.clone(),
        points: centers,
    };
    let phi = DiscreteField {
        grid: grid.clone(),
        values: phi_full,
    };
    let cell_norms = cell_norms(&phi, &centers_cfg);
    Ok(ReductionResult {
        centers: centers_cfg,
        phi,
        orth_residuals,
        z_norm_sq: zsq,
        cell_norms,
        iterations,
    })
}

/// Central-difference gradient magnitude at a node.
fn grad_norm(field: &DiscreteField, k: usize) -> f64 {
    let grid = &field.grid;
    let m = grid.multi_index(k);
    let mut s = 0.0;
    for a in 0..grid.n {
        let hi = grid
            .neighbor(&m, a, 1)
            .map_or(0.0, |mm| field.values[grid.flat_index(&mm)]);
        let lo = grid
            .neighbor(&m, a, -1)
            .map_or(0.0, |mm| field.values[grid.flat_index(&mm)]);
        s += ((hi - lo) / (2.0 * grid.h)).powi(2);
    }
    s.sqrt()
}

/// Sup of `|φ|` and `|∇_h φ|` over each Voronoi cell.
pub fn cell_norms(phi: &DiscreteField, centers: &Configuration) -> Vec<CellNorm> {
    let labels = voronoi_labels(&phi.grid, centers);
    let mut out = vec![
        CellNorm {
            sup_phi: 0.0,
            sup_grad_phi: 0.0,
            nodes: 0,
        };
        centers.len()
    ];
    for (k, &a) in labels.iter().enumerate() {
        if !phi.grid.is_interior(k) {
            continue;
        }
        let c = &mut out[a];
        c.sup_phi = c.sup_phi.max(phi.values[k].abs());
        c.sup_grad_phi = c.sup_grad_phi.max(grad_norm(phi, k));
        c.nodes += 1;
    }
    out
}

/// Interaction term `I(x) = (Σ W_α)^p - Σ W_α^p`.
///
/// Terms below `1e-17` of the largest bump value are dropped. The dominant
/// bump is factored out so that `I ≈ p W^{p-1} σ` keeps full relative
/// precision when the other bumps are tiny.
pub fn interaction_term(centers: &Configuration, profile: &GroundStateProfile, x: &[f64]) -> f64 {
    let p = profile.params.p;
    let mut terms = Vec::new();
    for c in &centers.points {
        for_each_displacement(&centers.geometry, x, c, IMAGE_CUTOFF, |d| {
            terms.push(profile.w(norm(d)))
        });
    }
    interaction_from_terms(&terms, p)
}

fn interaction_from_terms(terms: &[f64], p: f64) -> f64 {
    let Some((imax, &wmax)) = terms.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)) else {
        return 0.0;
    };
    if wmax <= 0.0 {
        return 0.0;
    }
    let mut sigma = 0.0;
    let mut others_p = 0.0;
    for (k, &w) in terms.iter().enumerate() {
        if k == imax || w < 1e-17 * wmax {
            continue;
        }
        sigma += w;
        others_p += w.powf(p);
    }
    wmax.powf(p) * (p * (sigma / wmax).ln_1p()).exp_m1() - others_p
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellInteraction {
    pub d_alpha: f64,
    pub sup_interaction: f64,
    /// `sup_{Ω_α} |I| / e^{-p D_α / 2}`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionBoundReport {
    pub cells: Vec<CellInteraction>,
    pub max_ratio: f64,
    pub min_interaction: f64,
}

/// Per-cell `sup |I|` on the grid nodes against `e^{-p D_α/2}`.
pub fn verify_interaction_bound(
    centers: &Configuration,
    profile: &GroundStateProfile,
    grid: &GridSpec,
) -> Result<InteractionBoundReport, ReductionError> {
    let p = profile.params.p;
    let d_alpha = if centers.len() >= 2 || (centers.len() == 1 && centers.periods().is_some()) {
        particles::distances(centers)?.d_alpha
    } else {
        vec![f64::INFINITY; centers.len()]
    };
    let labels = voronoi_labels(grid, centers);
    let values: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|k| interaction_term(centers, profile, &grid.node(k)))
        .collect();
    let mut sup = vec![0.0f64; centers.len()];
    for (k, &a) in labels.iter().enumerate() {
        if grid.is_interior(k) {
            sup[a] = sup[a].max(values[k].abs());
        }
    }
    let cells: Vec<CellInteraction> = sup
        .iter()
        .zip(&d_alpha)
        .map(|(&s, &d)| CellInteraction {
            d_alpha: d,
            sup_interaction: s,
            ratio: if d.is_finite() {
                s / (-p * d / 2.0).exp()
            } else {
                0.0
            },
        })
        .collect();
    Ok(InteractionBoundReport {
        max_ratio: cells.iter().map(|c| c.ratio).fold(0.0, f64::max),
        min_interaction: values.iter().cloned().fold(f64::INFINITY, f64::min),
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub alpha: usize,
    pub ball_radius: f64,
    /// `∫_{B_{D_α/2}(ξ_α)} I ∇W_α dx`.
    pub projection: Vec<f64>,
    /// `p c̄ Σ_β κ(d_αβ) (ξ_α - ξ_β)/|ξ_α - ξ_β|`.
    pub predicted: Vec<f64>,
    pub cbar: f64,
    pub kappa_alpha: f64,
    /// Projection of `projection` on `predicted` in units of `|predicted|`;
    /// absent when the prediction vanishes.
    pub ratio: Option<f64>,
}

/// Integrates `I ∇W_α` over the ball `B_{D_α/2}(ξ_α)` and compares with the
/// leading pair-interaction prediction built from `cbar`.
pub fn project_interaction(
    centers: &Configuration,
    profile: &GroundStateProfile,
    alpha: usize,
    cbar: f64,
) -> Result<ProjectionReport, ReductionError> {
    let n = centers.n;
    let p = profile.params.p;
    let lists = particles::partner_lists(centers)?;
    let d_alpha = particles::distances(centers)?.d_alpha[alpha];
    let radius = d_alpha / 2.0;
    let xi = &centers.points[alpha];
    let rule = CompositeRule::new(16, 0.25);
    let integrand = |d: &[f64]| -> Vec<f64> {
        let x: Vec<f64> = (0..n).map(|i| xi[i] + d[i]).collect();
        let i_val = interaction_term(centers, profile, &x);
        let r = norm(d);
        let wp = profile.w_prime_at(r);
        (0..n)
            .map(|i| if r > 0.0 { i_val * wp * d[i] / r } else { 0.0 })
            .collect()
    };
    let projection = match n {
        1 => {
            let pts = rule.points(-radius, radius);
            let parts: Vec<f64> = pts
                .par_iter()
                .map(|&(t, w)| w * integrand(&[t])[0])
                .collect();
            vec![parts.iter().sum()]
        }
        2 => {
            let n_theta = 256;
            let pts = rule.points(0.0, radius);
            let parts: Vec<[f64; 2]> = pts
                .par_iter()
                .map(|&(r, w)| {
                    let mut acc = [0.0; 2];
                    for k in 0..n_theta {
                        let th = 2.0 * std::f64::consts::PI * k as f64 / n_theta as f64;
                        let v = integrand(&[r * th.cos(), r * th.sin()]);
                        acc[0] += v[0];
                        acc[1] += v[1];
                    }
                    let scale = w * r * 2.0 * std::f64::consts::PI / n_theta as f64;
                    [acc[0] * scale, acc[1] * scale]
                })
                .collect();
            let mut s = vec![0.0; 2];
            for v in parts {
                s[0] += v[0];
                s[1] += v[1];
            }
            s
        }
        _ => {
            return Err(ReductionError::Unsupported(format!(
                "projection in dimension {n}"
            )))
        }
    };
    let mut predicted = vec![0.0; n];
    for nb in &lists[alpha] {
        let k = kappa(nb.distance, n).unwrap();
        for i in 0..n {
            predicted[i] -= p * cbar * k * nb.displacement[i] / nb.distance;
        }
    }
    let kappa_alpha = log_kappa(d_alpha, n).unwrap().exp();
    let pn2: f64 = predicted.iter().map(|v| v * v).sum();
    let ratio = if pn2.sqrt() > 1e-12 * p * cbar.abs() * kappa_alpha {
        Some(linalg::dot(&projection, &predicted) / pn2)
    } else {
        None
    };
    Ok(ProjectionReport {
        alpha,
        ball_radius: radius,
        projection,
        predicted,
        cbar,
        kappa_alpha,
        ratio,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedSolution {
    pub phi: DiscreteField,
    pub c: Vec<f64>,
    /// `sup e^{δ|x|} |φ|`.
    pub phi_weighted: f64,
    pub f_weighted: f64,
    /// Measured `(‖φ‖_δ + |c|) / ‖f‖_δ`.
    pub constant: f64,
    /// Share of the weighted sup of `φ` found within one unit of the window
    /// boundary.
    pub boundary_share: f64,
    pub refinement_sweeps: usize,
}

fn weighted_sup(field: &DiscreteField, delta: f64) -> f64 {
    let grid = &field.grid;
    (0..grid.len())
        .map(|k| (delta * norm(&grid.node(k))).exp() * field.values[k].abs())
        .fold(0.0, f64::max)
}

/// Solves `Δφ - φ + p W^{p-1} φ + c·∇W = f` with `Σ_x φ Z_i = 0` on a
/// Dirichlet window centered at the bump.
///
/// 1D uses the fourth-order five-point Laplacian (second order next to the
/// boundary); 2D uses the five-point second-order stencil.
pub fn solve_projected_linearized(
    profile: &GroundStateProfile,
    f: &DiscreteField,
    delta: f64,
) -> Result<ProjectedSolution, ReductionError> {
    let grid = &f.grid;
    let n = grid.n;
    if profile.params.n != n {
        return Err(ReductionError::DimensionMismatch(format!(
            "profile {}D, window {}D",
            profile.params.n, n
        )));
    }
    if grid.bc != BoundaryCondition::Dirichlet {
        return Err(ReductionError::Unsupported(
            "the window must carry Dirichlet data".into(),
        ));
    }
    let p = profile.params.p;
    let h = grid.h;
    let h2 = h * h;
    let nodes: Vec<usize> = (0..grid.len()).filter(|&k| grid.is_interior(k)).collect();
    let m = nodes.len();
    let potential: Vec<f64> = nodes
        .iter()
        .map(|&k| p * profile.w(norm(&grid.node(k))).powf(p - 1.0))
        .collect();
    let zcols: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            nodes
                .iter()
                .map(|&k| {
                    let x = grid.node(k);
                    let r = norm(&x);
                    if r > 0.0 {
                        profile.w_prime_at(r) * x[i] / r
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let rhs: Vec<f64> = nodes.iter().map(|&k| f.values[k]).collect();
    let (sol, c, sweeps) = if n == 1 {
        // Interior node j sits at grid index j + 1.
        let mut a = BandedMatrix::zeros(m, 2, 2);
        for j in 0..m {
            let near_boundary = j == 0 || j + 1 == m;
            if near_boundary {
                a.set(j, j, -2.0 / h2 - 1.0 + potential[j]);
                if j > 0 {
                    a.set(j, j - 1, 1.0 / h2);
                }
                if j + 1 < m {
                    a.set(j, j + 1, 1.0 / h2);
                }
            } else {
                let s = 1.0 / (12.0 * h2);
                a.set(j, j, -30.0 * s - 1.0 + potential[j]);
                a.set(j, j - 1, 16.0 * s);
                a.set(j, j + 1, 16.0 * s);
                if j >= 2 {
                    a.set(j, j - 2, -s);
                }
                if j + 2 < m {
                    a.set(j, j + 2, -s);
                }
            }
        }
        let mut shifted = a.clone();
        for j in 0..m {
            let d = shifted.get(j, j);
            shifted.set(j, j, d - 1e-9 * d.abs().max(1.0));
        }
        let lu = shifted.factor().map_err(ReductionError::SaddleSingular)?;
        let mut x = rhs.clone();
        let (sweeps, mu) = linalg::bordered_refinement(
            |v, out| a.matvec(v, out),
            |v| lu.solve(v),
            &zcols,
            &mut x,
            16.0 / h2,
            60,
        )
        .map_err(ReductionError::SaddleSingular)?;
        (x, mu, sweeps)
    } else {
        let dims = grid.dims();
        let slot = {
            let mut s = vec![usize::MAX; grid.len()];
            for (j, &k) in nodes.iter().enumerate() {
                s[k] = j;
            }
            s
        };
        let apply_a = |v: &[f64], out: &mut [f64]| {
            out.par_iter_mut().enumerate().for_each(|(j, o)| {
                let k = nodes[j];
                let mi = grid.multi_index(k);
                let mut lap = -2.0 * n as f64 * v[j];
                for a in 0..n {
                    for dir in [-1i64, 1] {
                        if let Some(mm) = grid.neighbor(&mi, a, dir) {
                            let kk = grid.flat_index(&mm);
                            if slot[kk] != usize::MAX {
                                lap += v[slot[kk]];
                            }
                        }
                    }
                }
                *o = lap / h2 - v[j] + potential[j] * v[j];
            });
        };
        let _ = dims;
        let apply = |v: &[f64], out: &mut [f64]| {
            apply_a(&v[..m], &mut out[..m]);
            for (i, z) in zcols.iter().enumerate() {
                for j in 0..m {
                    out[j] += v[m + i] * z[j];
                }
                out[m + i] = linalg::dot(z, &v[..m]);
            }
        };
        let diag: Vec<f64> = potential
            .iter()
            .map(|q| (-2.0 * n as f64 / h2 - 1.0 + q).abs().max(1.0))
            .collect();
        let mut pre = diag.clone();
        for z in &zcols {
            pre.push(
                z.iter()
                    .zip(&diag)
                    .map(|(v, d)| v * v / d)
                    .sum::<f64>()
                    .max(1e-300),
            );
        }
        let mut b = rhs.clone();
        b.resize(m + n, 0.0);
        let mut x = vec![0.0; m + n];
        let its = linalg::minres(
            apply,
            &pre,
            &b,
            &mut x,
            &KrylovOptions {
                rel_tol: 1e-12,
                max_iters: 100_000,
            },
        )
        .map_err(ReductionError::SaddleSingular)?;
        let c = x[m..].to_vec();
        x.truncate(m);
        (x, c, its)
    };
    let mut phi = DiscreteField::zeros(grid.clone());
    for (j, &k) in nodes.iter().enumerate() {
        phi.values[k] = sol[j];
    }
    let phi_weighted = weighted_sup(&phi, delta);
    let f_weighted = weighted_sup(f, delta);
    let cn = norm(&c);
    let boundary_share = if phi_weighted > 0.0 {
        let half: Vec<f64> = grid.extents.iter().map(|l| l / 2.0).collect();
        (0..grid.len())
            .filter(|&k| {
                let x = grid.node(k);
                (0..n).any(|a| (x[a] - grid.origin[a] - half[a]).abs() >= half[a] - 1.0)
            })
            .map(|k| (delta * norm(&grid.node(k))).exp() * phi.values[k].abs())
            .fold(0.0, f64::max)
            / phi_weighted
    } else {
        0.0
    };
    Ok(ProjectedSolution {
        constant: if f_weighted > 0.0 {
            (phi_weighted + cn) / f_weighted
        } else {
            0.0
        },
        phi,
        c,
        phi_weighted,
        f_weighted,
        boundary_share,
        refinement_sweeps: sweeps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub d_alpha: f64,
    pub sup_phi: f64,
    pub sup_grad_phi: f64,
    /// `sup|φ| / (D_α^{-(n-1)/2} e^{-D_α/2})`.
    pub remark_ratio: f64,
    /// `sup|φ| / e^{-(1-τ)D_α/2 - (p-1)D/2}`.
    pub estimate_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundReport {
    pub cells: Vec<CellError>,
    pub d_min: f64,
    pub max_sup_phi: f64,
    pub tau: f64,
    pub tau_admissible: bool,
}

/// Per-cell size of `φ` against the predicted decay rates.
pub fn verify_error_bound(
    result: &ReductionResult,
    p: f64,
    params: &ReductionParams,
) -> Result<ErrorBoundReport, ReductionError> {
    let dist = particles::distances(&result.centers)?;
    let n = result.centers.n;
    let cells = result
        .cell_norms
        .iter()
        .zip(&dist.d_alpha)
        .map(|(c, &d)| {
            let remark = (log_kappa(d, n).unwrap() + d / 2.0).exp();
            let estimate = (-(1.0 - params.tau) * d / 2.0 - (p - 1.0) * dist.d_min / 2.0).exp();
            CellError {
                d_alpha: d,
                sup_phi: c.sup_phi,
                sup_grad_phi: c.sup_grad_phi,
                remark_ratio: c.sup_phi / remark,
                estimate_ratio: c.sup_phi / estimate,
            }
        })
        .collect::<Vec<_>>();
    Ok(ErrorBoundReport {
        max_sup_phi: cells.iter().map(|c| c.sup_phi).fold(0.0, f64::max),
        cells,
        d_min: dist.d_min,
        tau: params.tau,
        tau_admissible: params.tau_admissible(p, dist.c0_measured),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// `-1/2 - slope`; positive when the decay beats `e^{-D/2}`.
    pub margin: f64,
    /// Whether `sup|φ| / (D^{-(n-1)/2} e^{-D/2})` decreases along the sweep.
    pub remark_ratios_decreasing: bool,
}

/// Least-squares fit of `ln sup|φ| ≈ slope·D + intercept` over a sweep.
pub fn fit_error_slope(ds: &[f64], sups: &[f64], n: usize) -> Option<SlopeFit> {
    if ds.len() < 2 || ds.len() != sups.len() || sups.iter().any(|&s| !(s > 0.0)) {
        return None;
    }
    let k = ds.len() as f64;
    let ys: Vec<f64> = sups.iter().map(|s| s.ln()).collect();
    let mx = ds.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = ds.iter().map(|d| (d - mx) * (d - mx)).sum();
    let sxy: f64 = ds.iter().zip(&ys).map(|(d, y)| (d - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let ratios: Vec<f64> = ds
        .iter()
        .zip(sups)
        .map(|(&d, &s)| s / (log_kappa(d, n).unwrap() + d / 2.0).exp())
        .collect();
    Some(SlopeFit {
        slope,
        intercept: my - slope * mx,
        margin: -0.5 - slope,
        remark_ratios_decreasing: ratios.windows(2).all(|w| w[1] < w[0]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cutoff_is_c2() {
        assert_eq!(eta(0.5), 1.0);
        assert_eq!(eta(2.5), 0.0);
        let h = 1e-6;
        for r in [1.0, 2.0] {
            assert!(eta_prime(r).abs() < 1e-12);
            let second = (eta_prime(r + h) - eta_prime(r - h)) / (2.0 * h);
            assert!(second.abs() < 1e-4, "η'' at {r}: {second}");
        }
        let r = 1.37;
        let fd = (eta(r + h) - eta(r - h)) / (2.0 * h);
        assert!((fd - eta_prime(r)).abs() < 1e-8);
    }

    #[test]
    fn interaction_of_two_equal_terms() {
        let p = 1.5;
        let w: f64 = 0.3;
        let exact = (2.0 * w).powf(p) - 2.0 * w.powf(p);
        assert!((interaction_from_terms(&[w, w], p) - exact).abs() < 1e-15);
        assert_eq!(interaction_from_terms(&[0.7], p), 0.0);
        assert_eq!(interaction_from_terms(&[], p), 0.0);
    }

    #[test]
    fn params_validation() {
        assert!(ReductionParams::default().validate().is_ok());
        let bad = ReductionParams {
            l: 6.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ReductionParams {
            delta: 0.4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
