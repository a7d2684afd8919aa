//! Separation continuation and the end-to-end balance-law pipeline.
//!
//! Each separation `D` is realized on a torus sized so that the initial
//! bumps sit `D` apart: solve the PDE, extract peaks, decompose the solution
//! orthogonally, and measure the balance residual and the size of `φ`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ground_state::GroundStateProfile;
use crate::kernels;
use crate::particles::{self, Configuration};
use crate::pde::{self, GridSpec, NewtonOptions, PdeError};
use crate::reduction::{self, ReductionError, ReductionParams, SlopeFit};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid continuation setup: {0}")]
    InvalidSetup(String),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Arrangement of the bumps on the torus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layout {
    /// `bumps` points on a ring of period `bumps·D`.
    Ring { bumps: usize },
    /// `per_side²` points on a square torus of side `per_side·D`.
    Square { per_side: usize },
}

impl Layout {
    fn bump_count(&self) -> usize {
        match self {
            Layout::Ring { bumps } => *bumps,
            Layout::Square { per_side } => per_side * per_side,
        }
    }

    fn dim(&self) -> usize {
        match self {
            Layout::Ring { .. } => 1,
            Layout::Square { .. } => 2,
        }
    }

    /// Equispaced centers at half-cell offsets, and the torus periods.
    fn lattice(&self, d: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
        match self {
            Layout::Ring { bumps } => (
                (0..*bumps).map(|k| vec![(k as f64 + 0.5) * d]).collect(),
                vec![*bumps as f64 * d],
            ),
            Layout::Square { per_side } => {
                let mut pts = Vec::with_capacity(per_side * per_side);
                for i in 0..*per_side {
                    for j in 0..*per_side {
                        pts.push(vec![(i as f64 + 0.5) * d, (j as f64 + 0.5) * d]);
                    }
                }
                (pts, vec![*per_side as f64 * d; 2])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationConfig {
    pub layout: Layout,
    pub h: f64,
    /// Initial displacement of each bump away from equispacing; cycled if
    /// shorter than the bump count.
    pub offsets: Vec<Vec<f64>>,
    pub newton: NewtonOptions,
    pub reduction: ReductionParams,
    pub peak_threshold: f64,
    pub exclusion_radius: f64,
    /// Compare against the single-bump solution of the same discrete problem
    /// (1D only) instead of the continuous profile.
    pub discrete_reference: bool,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        Self {
            layout: Layout::Ring { bumps: 3 },
            h: 0.05,
            offsets: vec![vec![0.0], vec![0.3], vec![-0.2]],
            newton: NewtonOptions {
                tol: 1e-11,
                ..NewtonOptions::default()
            },
            reduction: ReductionParams::default(),
            peak_threshold: pde::DEFAULT_PEAK_THRESHOLD,
            exclusion_radius: pde::DEFAULT_EXCLUSION_RADIUS,
            discrete_reference: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum EntryStatus {
    Converged,
    /// The solve succeeded but the solution lost the assumed peak structure.
    OutOfHypothesis(String),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationEntry {
    #[serde(rename = "D")]
    pub d: f64,
    pub status: EntryStatus,
    pub newton_iterations: Option<usize>,
    pub newton_residual: Option<f64>,
    pub peaks: Option<Configuration>,
    /// Centers after orthogonal decomposition.
    pub centers: Option<Configuration>,
    pub max_balance_residual: Option<f64>,
    /// `(max D_α - min D_α) / D` of the decomposed centers.
    pub spacing_deviation: Option<f64>,
    pub max_orth_residual: Option<f64>,
    pub sup_phi: Option<f64>,
    pub sup_grad_phi: Option<f64>,
}

impl ContinuationEntry {
    fn empty(d: f64, status: EntryStatus) -> Self {
        Self {
            d,
            status,
            newton_iterations: None,
            newton_residual: None,
            peaks: None,
            centers: None,
            max_balance_residual: None,
            spacing_deviation: None,
            max_orth_residual: None,
            sup_phi: None,
            sup_grad_phi: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationReport {
    pub p: f64,
    pub config: ContinuationConfig,
    pub entries: Vec<ContinuationEntry>,
}

impl ContinuationReport {
    /// Converged entries only.
    pub fn converged(&self) -> impl Iterator<Item = &ContinuationEntry> {
        self.entries
            .iter()
            .filter(|e| e.status == EntryStatus::Converged)
    }
}

/// Solves, extracts and decomposes at every separation in `separations`.
/// Failures are recorded per entry and the sweep continues.
pub fn separation_continuation(
    profile: &GroundStateProfile,
    separations: &[f64],
    config: &ContinuationConfig,
) -> Result<ContinuationReport, PipelineError> {
    let p = profile.params.p;
    let n = config.layout.dim();
    if profile.params.n != n {
        return Err(PipelineError::InvalidSetup(format!(
            "layout is {n}D but the profile is {}D",
            profile.params.n
        )));
    }
    if config.layout.bump_count() == 0 {
        return Err(PipelineError::InvalidSetup("no bumps".into()));
    }
    if config.offsets.iter().any(|o| o.len() != n) {
        return Err(PipelineError::InvalidSetup(format!(
            "offsets must have {n} components"
        )));
    }
    if !separations.windows(2).all(|w| w[1] > w[0]) {
        return Err(PipelineError::InvalidSetup(
            "separations must increase".into(),
        ));
    }
    config
        .reduction
        .validate()
        .map_err(|e| PipelineError::InvalidSetup(e.to_string()))?;
    let discrete;
    let reference = if config.discrete_reference && n == 1 {
        discrete = pde::discrete_ground_state(profile, config.h)?;
        &discrete
    } else {
        profile
    };
    let entries = separations
        .iter()
        .map(|&d| continuation_entry(profile, reference, d, config))
        .collect();
    Ok(ContinuationReport {
        p,
        config: config.clone(),
        entries,
    })
}

fn continuation_entry(
    profile: &GroundStateProfile,
    reference: &GroundStateProfile,
    d: f64,
    config: &ContinuationConfig,
) -> ContinuationEntry {
    let p = profile.params.p;
    let (mut points, periods) = config.layout.lattice(d);
    if !config.offsets.is_empty() {
        for (k, pt) in points.iter_mut().enumerate() {
            let off = &config.offsets[k % config.offsets.len()];
            for (x, o) in pt.iter_mut().zip(off) {
                *x += o;
            }
        }
    }
    let setup = GridSpec::periodic(periods.clone(), config.h)
        .and_then(|g| g.check_resolution(p).map(|_| g))
        .map_err(|e| e.to_string())
        .and_then(|g| {
            Configuration::torus(periods, points)
                .map(|c| (g, c))
                .map_err(|e| e.to_string())
        });
    let (grid, initial) = match setup {
        Ok(v) => v,
        Err(e) => return ContinuationEntry::empty(d, EntryStatus::Failed(e)),
    };
    let ansatz = match pde::build_ansatz(profile, &initial, &grid) {
        Ok(a) => a,
        Err(e) => return ContinuationEntry::empty(d, EntryStatus::Failed(e.to_string())),
    };
    let solved = match pde::newton_solve(&ansatz, p, &config.newton) {
        Ok(s) => s,
        Err(e) => return ContinuationEntry::empty(d, EntryStatus::Failed(e.to_string())),
    };
    let mut entry = ContinuationEntry::empty(d, EntryStatus::Converged);
    entry.newton_iterations = Some(solved.iterations);
    entry.newton_residual = Some(solved.residual);
    let peaks = match pde::extract_peaks(
        &solved.field,
        config.peak_threshold,
        config.exclusion_radius,
    ) {
        Ok(c) => c,
        Err(PdeError::NoPeaks(t)) => {
            entry.status = EntryStatus::OutOfHypothesis(format!("no peaks above {t}"));
            return entry;
        }
        Err(e) => {
            entry.status = EntryStatus::Failed(e.to_string());
            return entry;
        }
    };
    let expected = config.layout.bump_count();
    if peaks.len() != expected {
        entry.status =
            EntryStatus::OutOfHypothesis(format!("{} peaks, expected {expected}", peaks.len()));
        entry.peaks = Some(peaks);
        return entry;
    }
    entry.peaks = Some(peaks.clone());
    let decomposed = match reduction::orthogonal_decompose(
        &solved.field,
        reference,
        &peaks,
        &config.reduction,
    ) {
        Ok(r) => r,
        Err(e @ ReductionError::ProjectionSingular { .. }) => {
            entry.status = EntryStatus::OutOfHypothesis(e.to_string());
            return entry;
        }
        Err(e) => {
            entry.status = EntryStatus::Failed(e.to_string());
            return entry;
        }
    };
    entry.max_orth_residual = Some(decomposed.max_orth_residual());
    entry.sup_phi = Some(
        decomposed
            .cell_norms
            .iter()
            .map(|c| c.sup_phi)
            .fold(0.0, f64::max),
    );
    entry.sup_grad_phi = Some(
        decomposed
            .cell_norms
            .iter()
            .map(|c| c.sup_grad_phi)
            .fold(0.0, f64::max),
    );
    match (
        particles::balance_residual(&decomposed.centers, profile.params.n),
        particles::distances(&decomposed.centers),
    ) {
        (Ok(bal), Ok(dist)) => {
            entry.max_balance_residual = Some(bal.max_residual());
            let hi = dist.d_alpha.iter().cloned().fold(0.0, f64::max);
            entry.spacing_deviation = Some((hi - dist.d_min) / d);
        }
        (Err(e), _) | (_, Err(e)) => entry.status = EntryStatus::Failed(e.to_string()),
    }
    entry.centers = Some(decomposed.centers);
    entry
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRow {
    #[serde(rename = "D")]
    pub d: f64,
    pub max_balance_residual: Option<f64>,
    /// Projection of `I ∇W_α` for the end bump of the chain `{0, D, 2D}`
    /// relative to the leading pair term.
    pub projection_ratio: Option<f64>,
    /// Slope of `ln sup|φ|` against `D` over the converged rows so far.
    pub phi_slope_partial: Option<f64>,
    pub status: EntryStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub p: f64,
    pub cbar: f64,
    pub rows: Vec<PipelineRow>,
    pub slope_fit: Option<SlopeFit>,
    /// Whether the balance residual strictly decreases across all rows.
    pub balance_decreasing: bool,
    pub continuation: ContinuationReport,
}

/// Runs [`separation_continuation`] and attaches the projection ratios and
/// running decay slopes. `c̄` is the large-separation limit from
/// [`kernels::cbar_limit`].
pub fn reproduce_theorem_pipeline(
    profile: &GroundStateProfile,
    separations: &[f64],
    config: &ContinuationConfig,
) -> Result<PipelineSummary, PipelineError> {
    let continuation = separation_continuation(profile, separations, config)?;
    let n = profile.params.n;
    let cbar = kernels::cbar_limit(profile);
    let mut rows = Vec::with_capacity(continuation.entries.len());
    let (mut ds, mut sups) = (Vec::new(), Vec::new());
    for e in &continuation.entries {
        let projection_ratio = projection_chain_ratio(profile, e.d, cbar);
        if let (EntryStatus::Converged, Some(s)) = (&e.status, e.sup_phi) {
            ds.push(e.d);
            sups.push(s);
        }
        let phi_slope_partial = if e.status == EntryStatus::Converged {
            reduction::fit_error_slope(&ds, &sups, n).map(|f| f.slope)
        } else {
            None
        };
        rows.push(PipelineRow {
            d: e.d,
            max_balance_residual: e.max_balance_residual,
            projection_ratio,
            phi_slope_partial,
            status: e.status.clone(),
        });
    }
    let balances: Vec<Option<f64>> = rows.iter().map(|r| r.max_balance_residual).collect();
    let balance_decreasing = !balances.is_empty()
        && balances.iter().all(Option::is_some)
        && balances.windows(2).all(|w| w[1] < w[0]);
    Ok(PipelineSummary {
        p: profile.params.p,
        cbar,
        slope_fit: reduction::fit_error_slope(&ds, &sups, n),
        balance_decreasing,
        rows,
        continuation,
    })
}

/// Projection ratio for the end bump of three collinear bumps spaced `d`.
pub fn projection_chain_ratio(profile: &GroundStateProfile, d: f64, cbar: f64) -> Option<f64> {
    let n = profile.params.n;
    let points = (0..3)
        .map(|k| {
            let mut x = vec![0.0; n];
            x[0] = k as f64 * d;
            x
        })
        .collect();
    let chain = Configuration::free(n, points).ok()?;
    reduction::project_interaction(&chain, profile, 0, cbar)
        .ok()?
        .ratio
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// Writes the summary table with a header row.
pub fn write_pipeline_csv<W: Write>(rows: &[PipelineRow], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "D,max_balance_residual,projection_ratio,phi_slope_partial,status"
    )?;
    for r in rows {
        let status = match &r.status {
            EntryStatus::Converged => "converged",
            EntryStatus::OutOfHypothesis(_) => "out_of_hypothesis",
            EntryStatus::Failed(_) => "failed",
        };
        writeln!(
            out,
            "{},{},{},{},{}",
            r.d,
            csv_opt(r.max_balance_residual),
            csv_opt(r.projection_ratio),
            csv_opt(r.phi_slope_partial),
            status
        )?;
    }
    Ok(())
}
