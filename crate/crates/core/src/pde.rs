//! Finite-difference solver for `-Δu + u = |u|^{p-1}u` on 1D/2D boxes and tori.
//!
//! Newton steps are bordered with phase conditions `⟨δu, ∂_i u⟩ = 0`, one per
//! axis, which pin the (near-)translational kernel of the Jacobian. In 1D the
//! bordered system is solved with a banded factorization of a slightly
//! shifted Jacobian plus iterative refinement against the exact operator; in
//! 2D conjugate gradients are tried first and MINRES on the bordered system
//! takes over as soon as negative curvature shows up.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ground_state::GroundStateProfile;
use crate::linalg::{self, BandedLu, BandedMatrix, KrylovOptions, LinalgError, LowRankUpdate};
use crate::particles::{Configuration, Geometry};

#[derive(Debug, thiserror::Error)]
pub enum PdeError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid spacing {h} gives fewer than 16 nodes per unit length (needed for p = {p})")]
    Underresolved { h: f64, p: f64 },
    #[error("center {index} lies outside the computational box")]
    CenterOutOfDomain { index: usize },
    #[error("dimension mismatch: grid is {grid}D, centers are {centers}D")]
    DimensionMismatch { grid: usize, centers: usize },
    #[error("Newton diverged at iteration {iteration} (residual {residual:e})")]
    NewtonDiverged { iteration: usize, residual: f64 },
    #[error("Newton did not reach tolerance in {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("linear solve failed: {0}")]
    LinearSolveFailure(#[from] LinalgError),
    #[error("no peaks above threshold {0}")]
    NoPeaks(f64),
    #[error("non-finite values in field")]
    NonFinite,
    #[error("field file: {0}")]
    Io(#[from] std::io::Error),
    #[error("field file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryCondition {
    Periodic,
    /// Homogeneous Dirichlet data on the box boundary.
    Dirichlet,
}

/// Uniform tensor grid. Periodic grids have `L/h` nodes per axis starting at
/// `origin`; Dirichlet grids include both boundary nodes (held at zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    pub extents: Vec<f64>,
    pub h: f64,
    pub bc: BoundaryCondition,
    pub origin: Vec<f64>,
}

impl GridSpec {
    pub fn periodic(extents: Vec<f64>, h: f64) -> Result<Self, PdeError> {
        let g = Self {
            n: extents.len(),
            origin: vec![0.0; extents.len()],
            extents,
            h,
            bc: BoundaryCondition::Periodic,
        };
        g.validate()?;
        Ok(g)
    }

    /// Box `[-w_i, w_i]` per axis with zero boundary data.
    pub fn dirichlet_box(half_widths: Vec<f64>, h: f64) -> Result<Self, PdeError> {
        let g = Self {
            n: half_widths.len(),
            origin: half_widths.iter().map(|w| -w).collect(),
            extents: half_widths.iter().map(|w| 2.0 * w).collect(),
            h,
            bc: BoundaryCondition::Dirichlet,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), PdeError> {
        if !(1..=2).contains(&self.n) {
            return Err(PdeError::InvalidGrid(format!(
                "dimension {} not in 1..=2",
                self.n
            )));
        }
        if self.extents.len() != self.n || self.origin.len() != self.n {
            return Err(PdeError::InvalidGrid(
                "extents/origin length must equal n".into(),
            ));
        }
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(PdeError::InvalidGrid(format!(
                "spacing {} must be positive",
                self.h
            )));
        }
        for &l in &self.extents {
            let cells = l / self.h;
            if !(l > 0.0) || (cells - cells.round()).abs() > 1e-8 * cells.max(1.0) {
                return Err(PdeError::InvalidGrid(format!(
                    "extent {l} is not a whole number of cells of width {}",
                    self.h
                )));
            }
            if cells.round() < 4.0 {
                return Err(PdeError::InvalidGrid(format!(
                    "extent {l} has fewer than 4 cells"
                )));
            }
        }
        Ok(())
    }

    /// Requires at least 16 nodes per unit length when `p < 2`.
    pub fn check_resolution(&self, p: f64) -> Result<(), PdeError> {
        if p < 2.0 && self.h > 1.0 / 16.0 + 1e-12 {
            return Err(PdeError::Underresolved { h: self.h, p });
        }
        Ok(())
    }

    pub fn cells(&self, axis: usize) -> usize {
        (self.extents[axis] / self.h).round() as usize
    }

    pub fn dims(&self) -> Vec<usize> {
        (0..self.n)
            .map(|a| match self.bc {
                BoundaryCondition::Periodic => self.cells(a),
                BoundaryCondition::Dirichlet => self.cells(a) + 1,
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        self.origin[axis] + i as f64 * self.h
    }

    /// Multi-index of a flat (row-major, axis 0 slowest) node index.
    pub fn multi_index(&self, idx: usize) -> Vec<usize> {
        let dims = self.dims();
        let mut out = vec![0; self.n];
        let mut rem = idx;
        for a in (0..self.n).rev() {
            out[a] = rem % dims[a];
            rem /= dims[a];
        }
        out
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        let dims = self.dims();
        multi.iter().zip(&dims).fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn node(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx)
            .iter()
            .enumerate()
            .map(|(a, &i)| self.coord(a, i))
            .collect()
    }

    /// Boundary nodes of a Dirichlet grid are not unknowns.
    pub fn is_interior(&self, idx: usize) -> bool {
        match self.bc {
            BoundaryCondition::Periodic => true,
            BoundaryCondition::Dirichlet => {
                let dims = self.dims();
                self.multi_index(idx)
                    .iter()
                    .zip(&dims)
                    .all(|(&i, &d)| i > 0 && i + 1 < d)
            }
        }
    }

    /// Displacement `x - c` under the grid's metric (minimum image on a torus).
    pub fn displacement(&self, x: &[f64], c: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|a| {
                let d = x[a] - c[a];
                match self.bc {
                    BoundaryCondition::Periodic => {
                        let l = self.extents[a];
                        d - l * (d / l).round()
                    }
                    BoundaryCondition::Dirichlet => d,
                }
            })
            .collect()
    }

    /// Neighbor of a node one step along `axis` in direction `dir` (±1);
    /// `None` outside a Dirichlet box.
    pub fn neighbor(&self, multi: &[usize], axis: usize, dir: i64) -> Option<Vec<usize>> {
        let d = self.dims()[axis] as i64;
        let mut m = multi.to_vec();
        let j = m[axis] as i64 + dir;
        match self.bc {
            BoundaryCondition::Periodic => m[axis] = j.rem_euclid(d) as usize,
            BoundaryCondition::Dirichlet => {
                if j < 0 || j >= d {
                    return None;
                }
                m[axis] = j as usize;
            }
        }
        Some(m)
    }

    /// Geometry in which peaks of fields on this grid live.
    pub fn geometry(&self) -> Geometry {
        match self.bc {
            BoundaryCondition::Periodic => Geometry::Torus {
                periods: self.extents.clone(),
            },
            BoundaryCondition::Dirichlet => Geometry::FreeSpace,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl DiscreteField {
    pub fn zeros(grid: GridSpec) -> Self {
        let len = grid.len();
        Self {
            grid,
            values: vec![0.0; len],
        }
    }

    pub fn constant(grid: GridSpec, c: f64) -> Self {
        let mut f = Self::zeros(grid);
        let grid = f.grid.clone();
        for (k, v) in f.values.iter_mut().enumerate() {
            if grid.is_interior(k) {
                *v = c;
            }
        }
        f
    }

    pub fn from_fn<F: Fn(&[f64]) -> f64 + Sync>(grid: GridSpec, f: F) -> Self {
        let values = (0..grid.len())
            .into_par_iter()
            .map(|k| {
                if grid.is_interior(k) {
                    f(&grid.node(k))
                } else {
                    0.0
                }
            })
            .collect();
        Self { grid, values }
    }

    pub fn sup_norm(&self) -> f64 {
        linalg::norm_inf(&self.values)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Writes the field in the little-endian binary layout documented in
    /// `docs/formats.md`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), PdeError> {
        let dims = self.grid.dims();
        w.write_all(&(self.grid.n as u32).to_le_bytes())?;
        for d in &dims {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        w.write_all(&self.grid.h.to_le_bytes())?;
        let bc: u8 = match self.grid.bc {
            BoundaryCondition::Periodic => 0,
            BoundaryCondition::Dirichlet => 1,
        };
        w.write_all(&[bc])?;
        for o in &self.grid.origin {
            w.write_all(&o.to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, PdeError> {
        fn take<const K: usize, R: Read>(r: &mut R) -> Result<[u8; K], PdeError> {
            let mut b = [0u8; K];
            r.read_exact(&mut b)?;
            Ok(b)
        }
        let n = u32::from_le_bytes(take::<4, _>(&mut r)?) as usize;
        if !(1..=2).contains(&n) {
            return Err(PdeError::Format(format!("dimension {n} not supported")));
        }
        let dims: Vec<usize> = (0..n)
            .map(|_| take::<8, _>(&mut r).map(|b| u64::from_le_bytes(b) as usize))
            .collect::<Result<_, _>>()?;
        let h = f64::from_le_bytes(take::<8, _>(&mut r)?);
        let bc = match take::<1, _>(&mut r)?[0] {
            0 => BoundaryCondition::Periodic,
            1 => BoundaryCondition::Dirichlet,
            other => return Err(PdeError::Format(format!("unknown boundary code {other}"))),
        };
        let origin: Vec<f64> = (0..n)
            .map(|_| take::<8, _>(&mut r).map(f64::from_le_bytes))
            .collect::<Result<_, _>>()?;
        let extents = dims
            .iter()
            .map(|&d| match bc {
                BoundaryCondition::Periodic => d as f64 * h,
                BoundaryCondition::Dirichlet => (d as f64 - 1.0) * h,
            })
            .collect();
        let grid = GridSpec {
            n,
            extents,
            h,
            bc,
            origin,
        };
        grid.validate()?;
        let len: usize = dims.iter().product();
        let mut bytes = vec![0u8; len * 8];
        r.read_exact(&mut bytes)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(PdeError::Format(format!("{} trailing bytes", rest.len())));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { grid, values })
    }
}

/// Largest distance at which bump images are still summed.
const ANSATZ_CUTOFF: f64 = 80.0;

/// `Σ_α W(x - ξ_α)` on the grid, summing periodic images on a torus.
pub fn build_ansatz(
    profile: &GroundStateProfile,
    centers: &Configuration,
    grid: &GridSpec,
) -> Result<DiscreteField, PdeError> {
    grid.validate()?;
    if !centers.is_empty() && centers.n != grid.n {
        return Err(PdeError::DimensionMismatch {
            grid: grid.n,
            centers: centers.n,
        });
    }
    if grid.bc == BoundaryCondition::Dirichlet {
        for (k, c) in centers.points.iter().enumerate() {
            let inside = (0..grid.n)
                .all(|a| c[a] >= grid.origin[a] && c[a] <= grid.origin[a] + grid.extents[a]);
            if !inside {
                return Err(PdeError::CenterOutOfDomain { index: k });
            }
        }
    }
    let reach: Vec<i64> = match grid.bc {
        BoundaryCondition::Periodic => grid
            .extents
            .iter()
            .map(|l| (ANSATZ_CUTOFF / l).ceil() as i64 + 1)
            .collect(),
        BoundaryCondition::Dirichlet => vec![0; grid.n],
    };
    let pts = centers.points.clone();
    Ok(DiscreteField::from_fn(grid.clone(), |x| {
        let mut s = 0.0;
        for c in &pts {
            let base = grid.displacement(x, c);
            match grid.n {
                1 => {
                    for k in -reach[0]..=reach[0] {
                        let d = (base[0] + k as f64 * grid.extents[0]).abs();
                        if d <= ANSATZ_CUTOFF {
                            s += profile.w(d);
                        }
                    }
                }
                _ => {
                    for k0 in -reach[0]..=reach[0] {
                        for k1 in -reach[1]..=reach[1] {
                            let d0 = base[0] + k0 as f64 * grid.extents[0];
                            let d1 = base[1] + k1 as f64 * grid.extents[1];
                            let d = d0.hypot(d1);
                            if d <= ANSATZ_CUTOFF {
                                s += profile.w(d);
                            }
                        }
                    }
                }
            }
        }
        s
    }))
}

fn signed_pow(u: f64, p: f64) -> f64 {
    u.abs().powf(p - 1.0) * u
}

/// `Δ_h u` at node `k` (boundary neighbors of a Dirichlet box contribute 0).
fn laplacian_at(grid: &GridSpec, dims: &[usize], values: &[f64], k: usize) -> f64 {
    let h2 = grid.h * grid.h;
    let mut multi = vec![0usize; grid.n];
    let mut rem = k;
    for a in (0..grid.n).rev() {
        multi[a] = rem % dims[a];
        rem /= dims[a];
    }
    let mut stride = 1usize;
    let mut strides = vec![0usize; grid.n];
    for a in (0..grid.n).rev() {
        strides[a] = stride;
        stride *= dims[a];
    }
    let mut s = 0.0;
    for a in 0..grid.n {
        let i = multi[a];
        let d = dims[a];
        let (lo, hi) = match grid.bc {
            BoundaryCondition::Periodic => {
                let lo = if i == 0 {
                    k + (d - 1) * strides[a]
                } else {
                    k - strides[a]
                };
                let hi = if i + 1 == d {
                    k - (d - 1) * strides[a]
                } else {
                    k + strides[a]
                };
                (values[lo], values[hi])
            }
            BoundaryCondition::Dirichlet => (
                if i == 0 { 0.0 } else { values[k - strides[a]] },
                if i + 1 == d {
                    0.0
                } else {
                    values[k + strides[a]]
                },
            ),
        };
        s += lo + hi - 2.0 * values[k];
    }
    s / h2
}

/// Discrete residual `-Δ_h u + u - |u|^{p-1}u` at every node (zero on
/// Dirichlet boundary nodes).
pub fn residual_field(field: &DiscreteField, p: f64) -> Vec<f64> {
    let grid = &field.grid;
    let dims = grid.dims();
    (0..field.values.len())
        .into_par_iter()
        .map(|k| {
            if !grid.is_interior(k) {
                return 0.0;
            }
            let u = field.values[k];
            -laplacian_at(grid, &dims, &field.values, k) + u - signed_pow(u, p)
        })
        .collect()
}

/// Sup-norm of the discrete residual over interior nodes.
pub fn residual(field: &DiscreteField, p: f64) -> f64 {
    linalg::norm_inf(&residual_field(field, p))
}

/// Half-width of the box used by [`discrete_ground_state`].
const DISCRETE_PROFILE_HALF_WIDTH: f64 = 40.0;
/// Radius beyond which the discrete profile switches to its exponential tail.
const DISCRETE_PROFILE_TAIL: f64 = 30.0;

/// The single-bump solution of the 1D finite-difference problem with spacing
/// `h`, repackaged as a radial profile.
///
/// Comparing a discrete multi-bump solution with this profile instead of the
/// continuous `W` removes the `O(h²)` discretization error from `φ`, which
/// otherwise dominates it at moderate separations. Values between nodes are
/// Hermite-interpolated with fourth-order difference slopes.
pub fn discrete_ground_state(
    profile: &GroundStateProfile,
    h: f64,
) -> Result<GroundStateProfile, PdeError> {
    if profile.params.n != 1 {
        return Err(PdeError::InvalidGrid(
            "discrete profiles are one-dimensional".into(),
        ));
    }
    let grid = GridSpec::dirichlet_box(vec![DISCRETE_PROFILE_HALF_WIDTH], h)?;
    let center = Configuration {
        n: 1,
        geometry: Geometry::FreeSpace,
        points: vec![vec![0.0]],
    };
    let ansatz = build_ansatz(profile, &center, &grid)?;
    let solved = newton_solve(&ansatz, profile.params.p, &NewtonOptions::default())?;
    let mid = (DISCRETE_PROFILE_HALF_WIDTH / h).round() as usize;
    let values = &solved.field.values;
    let count = grid.cells(0) - mid;
    // Even extension about the center supplies the stencil at small radii.
    let sym = |i: i64| -> f64 { values[mid + i.unsigned_abs() as usize] };
    let mut r_grid = Vec::with_capacity(count);
    let mut w_values = Vec::with_capacity(count);
    let mut w_prime = Vec::with_capacity(count);
    for i in 0..count as i64 - 2 {
        r_grid.push(i as f64 * h);
        w_values.push(sym(i));
        w_prime.push((sym(i - 2) - 8.0 * sym(i - 1) + 8.0 * sym(i + 1) - sym(i + 2)) / (12.0 * h));
    }
    let switch = DISCRETE_PROFILE_TAIL.min(r_grid[r_grid.len() - 1] - 1.0);
    let k = (switch / h).round() as usize;
    let switch = r_grid[k];
    let m = profile.params.decay_power();
    Ok(GroundStateProfile {
        params: profile.params,
        w0: w_values[0],
        r_max: r_grid[r_grid.len() - 1],
        asympt_c: w_values[k] * switch.powf(m) * switch.exp(),
        tail_switch_radius: switch,
        tail_spread: 0.0,
        tail_resolved: true,
        r_grid,
        w_values,
        w_prime,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Initial step fraction of every Newton update.
    pub damping: f64,
    pub u_floor: f64,
    pub phase_condition: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 60,
            damping: 1.0,
            u_floor: 1e-8,
            phase_condition: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonRow {
    pub iter: usize,
    pub residual: f64,
    pub step: f64,
    pub linear_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonOutcome {
    pub field: DiscreteField,
    pub iterations: usize,
    pub residual: f64,
    pub trace: Vec<NewtonRow>,
    pub min_value: f64,
    /// False if a nonnegative start produced negative values.
    pub nonnegative: bool,
}

/// Jacobian diagonal term `p |u|^{p-1}`, floored at `u_floor` for `p < 2`.
fn reaction_derivative(u: f64, p: f64, floor: f64) -> f64 {
    let a = if p < 2.0 { u.abs().max(floor) } else { u.abs() };
    p * a.powf(p - 1.0)
}

/// Nodes that carry unknowns, in node order.
struct Unknowns {
    nodes: Vec<usize>,
}

impl Unknowns {
    fn new(grid: &GridSpec) -> Self {
        Self {
            nodes: (0..grid.len()).filter(|&k| grid.is_interior(k)).collect(),
        }
    }
}

/// Jacobian `J = -Δ_h + I - diag(q)` restricted to the unknowns.
struct Jacobian<'a> {
    grid: &'a GridSpec,
    dims: Vec<usize>,
    unknowns: &'a Unknowns,
    q: Vec<f64>,
}

impl Jacobian<'_> {
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let full_len = self.grid.len();
        let mut full = vec![0.0; full_len];
        for (i, &k) in self.unknowns.nodes.iter().enumerate() {
            full[k] = x[i];
        }
        y.par_iter_mut().enumerate().for_each(|(i, yi)| {
            let k = self.unknowns.nodes[i];
            *yi = -laplacian_at(self.grid, &self.dims, &full, k) + (1.0 - self.q[i]) * x[i];
        });
    }

    fn diag(&self) -> Vec<f64> {
        let h2 = self.grid.h * self.grid.h;
        self.q
            .iter()
            .map(|qi| 2.0 * self.grid.n as f64 / h2 + 1.0 - qi)
            .collect()
    }
}

/// Centered-difference gradient component along `axis` at the unknowns.
fn gradient_component(field: &DiscreteField, unknowns: &Unknowns, axis: usize) -> Vec<f64> {
    let grid = &field.grid;
    unknowns
        .nodes
        .iter()
        .map(|&k| {
            let m = grid.multi_index(k);
            let hi = grid
                .neighbor(&m, axis, 1)
                .map_or(0.0, |mm| field.values[grid.flat_index(&mm)]);
            let lo = grid
                .neighbor(&m, axis, -1)
                .map_or(0.0, |mm| field.values[grid.flat_index(&mm)]);
            (hi - lo) / (2.0 * grid.h)
        })
        .collect()
}

/// Relative shift applied to the 1D banded factorization.
const BANDED_SHIFT: f64 = 1e-9;
const REFINEMENT_STEPS: usize = 60;

/// Solves `[J G; Gᵀ 0] [x; μ] = [b; 0]` for 1D grids; returns the refinement
/// iteration count.
fn solve_bordered_1d(jac: &Jacobian, g: &[Vec<f64>], b: &mut [f64]) -> Result<usize, PdeError> {
    let m = b.len();
    let h2 = jac.grid.h * jac.grid.h;
    let periodic = jac.grid.bc == BoundaryCondition::Periodic;
    // Rotate the ring so that the cut falls where |u| is smallest.
    let start = if periodic {
        jac.q
            .iter()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |best, (i, &q)| if q < best.1 { (i, q) } else { best },
            )
            .0
    } else {
        0
    };
    let perm: Vec<usize> = (0..m).map(|j| (j + start) % m).collect();
    let diag = jac.diag();
    let mut t = BandedMatrix::zeros(m, 1, 1);
    for j in 0..m {
        let d = diag[perm[j]];
        t.set(j, j, d + BANDED_SHIFT * d.abs().max(1.0));
        if j + 1 < m {
            t.set(j, j + 1, -1.0 / h2);
            t.set(j + 1, j, -1.0 / h2);
        }
    }
    let lu = t.factor()?;
    let approx = if periodic {
        let mut u0 = vec![0.0; m];
        let mut u1 = vec![0.0; m];
        let mut v0 = vec![0.0; m];
        let mut v1 = vec![0.0; m];
        u0[0] = -1.0 / h2;
        v0[m - 1] = 1.0;
        u1[m - 1] = -1.0 / h2;
        v1[0] = 1.0;
        Approx1d::Ring(LowRankUpdate::new(lu, vec![u0, u1], vec![v0, v1])?)
    } else {
        Approx1d::Line(lu)
    };
    let solve_a = |x: &mut [f64]| {
        let mut y: Vec<f64> = perm.iter().map(|&k| x[k]).collect();
        approx.solve(&mut y);
        for (j, &k) in perm.iter().enumerate() {
            x[k] = y[j];
        }
    };
    let (iters, _) = linalg::bordered_refinement(
        |x, y| jac.apply(x, y),
        solve_a,
        g,
        b,
        4.0 / h2 + 1.0,
        REFINEMENT_STEPS,
    )?;
    Ok(iters)
}

enum Approx1d {
    Line(BandedLu),
    Ring(LowRankUpdate),
}

impl Approx1d {
    fn solve(&self, x: &mut [f64]) {
        match self {
            Approx1d::Line(lu) => lu.solve(x),
            Approx1d::Ring(w) => w.solve(x),
        }
    }
}

/// 2D: CG on `J`, then MINRES on the bordered system after negative curvature.
fn solve_2d(jac: &Jacobian, g: &[Vec<f64>], b: &mut [f64]) -> Result<usize, PdeError> {
    let m = b.len();
    let diag = jac.diag();
    let opts = KrylovOptions {
        rel_tol: 1e-11,
        max_iters: 50_000,
    };
    if g.is_empty() {
        let mut x = vec![0.0; m];
        if let Ok(it) = linalg::pcg(|v, out| jac.apply(v, out), &diag, b, &mut x, &opts) {
            b.copy_from_slice(&x);
            return Ok(it);
        }
    }
    let k = g.len();
    let apply = |v: &[f64], out: &mut [f64]| {
        jac.apply(&v[..m], &mut out[..m]);
        for (j, gj) in g.iter().enumerate() {
            for i in 0..m {
                out[i] += v[m + j] * gj[i];
            }
            out[m + j] = linalg::dot(gj, &v[..m]);
        }
    };
    let mut precond: Vec<f64> = diag.iter().map(|d| d.abs().max(1.0)).collect();
    for gj in g {
        // Schur-type scale for the constraint rows.
        let s: f64 = gj
            .iter()
            .zip(&diag)
            .map(|(v, d)| v * v / d.abs().max(1.0))
            .sum();
        precond.push(s.max(1e-300));
    }
    let mut rhs = b.to_vec();
    rhs.resize(m + k, 0.0);
    let mut x = vec![0.0; m + k];
    let it = linalg::minres(apply, &precond, &rhs, &mut x, &opts)?;
    b.copy_from_slice(&x[..m]);
    Ok(it)
}

/// Damped Newton with backtracking on `‖F‖₂`.
pub fn newton_solve(
    initial: &DiscreteField,
    p: f64,
    opts: &NewtonOptions,
) -> Result<NewtonOutcome, PdeError> {
    let grid = initial.grid.clone();
    grid.validate()?;
    if initial.values.len() != grid.len() {
        return Err(PdeError::InvalidGrid(
            "value count does not match grid".into(),
        ));
    }
    if initial.values.iter().any(|v| !v.is_finite()) {
        return Err(PdeError::NonFinite);
    }
    let started_nonnegative = initial.min_value() >= 0.0;
    let unknowns = Unknowns::new(&grid);
    let dims = grid.dims();
    let mut field = initial.clone();
    for (k, v) in field.values.iter_mut().enumerate() {
        if !grid.is_interior(k) {
            *v = 0.0;
        }
    }
    let restrict = |full: &[f64]| -> Vec<f64> { unknowns.nodes.iter().map(|&k| full[k]).collect() };
    let mut f = restrict(&residual_field(&field, p));
    let mut res = linalg::norm_inf(&f);
    let mut merit = linalg::norm2(&f);
    let mut trace = vec![NewtonRow {
        iter: 0,
        residual: res,
        step: 0.0,
        linear_iterations: 0,
    }];
    let mut iter = 0;
    while res >= opts.tol {
        if iter >= opts.max_iters {
            return Err(PdeError::NoConvergence {
                iterations: iter,
                residual: res,
            });
        }
        iter += 1;
        let q: Vec<f64> = unknowns
            .nodes
            .iter()
            .map(|&k| reaction_derivative(field.values[k], p, opts.u_floor))
            .collect();
        let jac = Jacobian {
            grid: &grid,
            dims: dims.clone(),
            unknowns: &unknowns,
            q,
        };
        let mut g: Vec<Vec<f64>> = Vec::new();
        if opts.phase_condition {
            for a in 0..grid.n {
                let gi = gradient_component(&field, &unknowns, a);
                let gn = linalg::norm2(&gi);
                let un = linalg::norm2(&restrict(&field.values)).max(f64::MIN_POSITIVE);
                if gn > 1e-8 * un {
                    g.push(gi.iter().map(|v| v / gn).collect());
                }
            }
        }
        let mut delta: Vec<f64> = f.iter().map(|v| -v).collect();
        let lin_iters = if grid.n == 1 {
            solve_bordered_1d(&jac, &g, &mut delta)?
        } else {
            solve_2d(&jac, &g, &mut delta)?
        };
        let mut step = opts.damping;
        let mut accepted = None;
        for _ in 0..=30 {
            let mut trial = field.clone();
            for (i, &k) in unknowns.nodes.iter().enumerate() {
                trial.values[k] += step * delta[i];
            }
            let tf = restrict(&residual_field(&trial, p));
            let tm = linalg::norm2(&tf);
            if tm.is_finite() && tm < merit {
                accepted = Some((trial, tf, tm));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, tf, tm)) = accepted else {
            return Err(PdeError::NewtonDiverged {
                iteration: iter,
                residual: res,
            });
        };
        field = trial;
        f = tf;
        merit = tm;
        res = linalg::norm_inf(&f);
        trace.push(NewtonRow {
            iter,
            residual: res,
            step,
            linear_iterations: lin_iters,
        });
    }
    let min_value = field.min_value();
    Ok(NewtonOutcome {
        nonnegative: !started_nonnegative || min_value >= 0.0,
        min_value,
        residual: res,
        iterations: iter,
        trace,
        field,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub position: Vec<f64>,
    pub value: f64,
    pub node: usize,
}

pub const DEFAULT_PEAK_THRESHOLD: f64 = 0.5;
pub const DEFAULT_EXCLUSION_RADIUS: f64 = 5.0;
const PEAK_TIE_TOL: f64 = 1e-9;

/// Local maxima above `threshold`, refined by a quadratic fit and merged
/// within `exclusion_radius`; sorted by node index.
pub fn find_peaks(
    field: &DiscreteField,
    threshold: f64,
    exclusion_radius: f64,
) -> Result<Vec<Peak>, PdeError> {
    let grid = &field.grid;
    let v = &field.values;
    let n = grid.n;
    let mut candidates = Vec::new();
    for k in 0..v.len() {
        if !grid.is_interior(k) || !(v[k] > threshold) {
            continue;
        }
        let m = grid.multi_index(k);
        // Differences below `tie` are rounding noise, not structure.
        let tie = PEAK_TIE_TOL * v[k].abs().max(1.0);
        // Strictly above neighbors that come earlier in node order, not below later ones.
        let mut is_max = true;
        let mut rises = false;
        let offsets: Vec<Vec<i64>> = stencil_offsets(n);
        for off in &offsets {
            if off.iter().all(|&o| o == 0) {
                continue;
            }
            let mut mm = Some(m.clone());
            for (a, &o) in off.iter().enumerate() {
                if o != 0 {
                    mm = mm.and_then(|x| grid.neighbor(&x, a, o));
                }
            }
            let Some(mm) = mm else { continue };
            let j = grid.flat_index(&mm);
            if j == k {
                continue;
            }
            let ok = if j < k {
                v[k] > v[j] + tie
            } else {
                v[k] >= v[j] - tie
            };
            if !ok {
                is_max = false;
                break;
            }
            rises |= v[k] > v[j] + tie;
        }
        if is_max && rises {
            candidates.push(k);
        }
    }
    let mut peaks: Vec<Peak> = candidates
        .into_iter()
        .map(|k| refine_peak(field, k))
        .collect();
    peaks.sort_by(|a, b| b.value.total_cmp(&a.value).then(a.node.cmp(&b.node)));
    let mut kept: Vec<Peak> = Vec::new();
    for pk in peaks {
        let close = kept.iter().any(|q| {
            let d = grid.displacement(&pk.position, &q.position);
            d.iter().map(|x| x * x).sum::<f64>().sqrt() < exclusion_radius
        });
        if !close {
            kept.push(pk);
        }
    }
    if kept.is_empty() {
        return Err(PdeError::NoPeaks(threshold));
    }
    kept.sort_by_key(|p| p.node);
    Ok(kept)
}

fn stencil_offsets(n: usize) -> Vec<Vec<i64>> {
    if n == 1 {
        (-1..=1).map(|o| vec![o]).collect()
    } else {
        let mut out = Vec::new();
        for a in -1..=1 {
            for b in -1..=1 {
                out.push(vec![a, b]);
            }
        }
        out
    }
}

fn value_at(field: &DiscreteField, m: &[usize], off: &[i64]) -> f64 {
    let grid = &field.grid;
    let mut mm = Some(m.to_vec());
    for (a, &o) in off.iter().enumerate() {
        if o != 0 {
            mm = mm.and_then(|x| grid.neighbor(&x, a, o));
        }
    }
    mm.map_or(0.0, |x| field.values[grid.flat_index(&x)])
}

/// Quadratic refinement on the `3^n` stencil; offsets beyond one cell or a
/// non-concave fit fall back to the node itself.
fn refine_peak(field: &DiscreteField, k: usize) -> Peak {
    let grid = &field.grid;
    let m = grid.multi_index(k);
    let node = grid.node(k);
    let f0 = field.values[k];
    let (offset, value) = if grid.n == 1 {
        let fm = value_at(field, &m, &[-1]);
        let fp = value_at(field, &m, &[1]);
        let curv = fm - 2.0 * f0 + fp;
        if curv < 0.0 {
            let t = 0.5 * (fm - fp) / curv;
            if t.abs() <= 1.0 {
                (vec![t], f0 - 0.125 * (fm - fp) * (fm - fp) / curv)
            } else {
                (vec![0.0], f0)
            }
        } else {
            (vec![0.0], f0)
        }
    } else {
        let mut s = [[0.0; 3]; 3];
        for (a, row) in s.iter_mut().enumerate() {
            for (b, cell) in row.iter_mut().enumerate() {
                *cell = value_at(field, &m, &[a as i64 - 1, b as i64 - 1]);
            }
        }
        let col = |a: usize| s[a].iter().sum::<f64>();
        let row = |b: usize| (0..3).map(|a| s[a][b]).sum::<f64>();
        let c1 = (col(2) - col(0)) / 6.0;
        let c2 = (row(2) - row(0)) / 6.0;
        let c3 = (col(2) + col(0) - 2.0 * col(1)) / 6.0;
        let c5 = (row(2) + row(0) - 2.0 * row(1)) / 6.0;
        let c4 = (s[2][2] - s[2][0] - s[0][2] + s[0][0]) / 4.0;
        let det = 4.0 * c3 * c5 - c4 * c4;
        if c3 < 0.0 && det > 0.0 {
            let x = (-2.0 * c5 * c1 + c4 * c2) / det;
            let y = (-2.0 * c3 * c2 + c4 * c1) / det;
            if x.abs() <= 1.0 && y.abs() <= 1.0 {
                let c0 = f0;
                let val = c0 + 0.5 * (c1 * x + c2 * y);
                (vec![x, y], val.max(f0))
            } else {
                (vec![0.0, 0.0], f0)
            }
        } else {
            (vec![0.0, 0.0], f0)
        }
    };
    let mut position: Vec<f64> = node
        .iter()
        .zip(&offset)
        .map(|(x, o)| x + o * grid.h)
        .collect();
    if grid.bc == BoundaryCondition::Periodic {
        for (a, x) in position.iter_mut().enumerate() {
            let l = grid.extents[a];
            *x = (*x - grid.origin[a]).rem_euclid(l) + grid.origin[a];
        }
    }
    Peak {
        position,
        value,
        node: k,
    }
}

/// Peak centers as a configuration in the grid's geometry.
pub fn extract_peaks(
    field: &DiscreteField,
    threshold: f64,
    exclusion_radius: f64,
) -> Result<Configuration, PdeError> {
    let peaks = find_peaks(field, threshold, exclusion_radius)?;
    Ok(Configuration {
        n: field.grid.n,
        geometry: field.grid.geometry(),
        points: peaks.into_iter().map(|p| p.position).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip() {
        let g = GridSpec::periodic(vec![2.0, 1.0], 0.25).unwrap();
        let f = DiscreteField::from_fn(g, |x| x[0] * 10.0 + x[1]);
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 16 + 8 + 1 + 16 + 8 * 32);
        let back = DiscreteField::read_binary(&buf[..]).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let g = GridSpec::periodic(vec![1.0], 0.25).unwrap();
        let f = DiscreteField::zeros(g);
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        assert!(DiscreteField::read_binary(&buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn laplacian_of_quadratic_is_exact() {
        let g = GridSpec::dirichlet_box(vec![1.0], 0.125).unwrap();
        let f = DiscreteField::from_fn(g.clone(), |x| 1.0 - x[0] * x[0]);
        let dims = g.dims();
        for k in 1..dims[0] - 1 {
            assert!((laplacian_at(&g, &dims, &f.values, k) + 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn parabolic_refinement_recovers_vertex() {
        let g = GridSpec::periodic(vec![10.0], 0.1).unwrap();
        let f = DiscreteField::from_fn(g, |x| 2.0 - (x[0] - 4.03).powi(2));
        let peaks = find_peaks(&f, 0.5, 5.0).unwrap();
        assert_eq!(peaks.len(), 1);
        assert!((peaks[0].position[0] - 4.03).abs() < 1e-12);
    }
}
