//! Subcommand implementations. Each one resolves its parameters, computes
//! everything in memory and returns the artifacts to write, so a failing run
//! leaves no partial outputs.

use std::io::Write;
use std::path::{Path, PathBuf};

use bumpkit::ground_state::{
    asymptotic_constant, max_ode_residual, solve_ground_state, AsymptoticFit, GroundStateProfile,
    ModelParams,
};
use bumpkit::kernels::{cbar_estimate, cbar_limit, pair_integral_sweep, CbarFit, KernelReport};
use bumpkit::particles::{
    balance_residual, distances, nearest_sets, relax, verify_theorem, Configuration,
    DistanceReport, RelaxOptions, RelaxStatus, TheoremCheck, DEFAULT_NEAREST_TOL,
};
use bumpkit::pde::{
    build_ansatz, find_peaks, newton_solve, GridSpec, NewtonOptions, NewtonRow, Peak,
    DEFAULT_EXCLUSION_RADIUS, DEFAULT_PEAK_THRESHOLD,
};
use bumpkit::pipeline::{
    reproduce_theorem_pipeline, separation_continuation, write_pipeline_csv, ContinuationConfig,
    ContinuationEntry, EntryStatus, Layout,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::args::{GroundStateArgs, KernelArgs, RelaxArgs, SolveArgs, SweepArgs, VerifyArgs};
use crate::error::CliError;

/// Settings shared by every run and recorded in every report.
#[derive(Debug, Clone, Serialize)]
pub struct RunInfo {
    pub command: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub threads: usize,
}

#[derive(Serialize)]
struct Report<'a, S, R> {
    run: &'a RunInfo,
    spec: S,
    result: R,
}

/// A named output file and its bytes.
pub struct Artifact {
    pub name: &'static str,
    pub bytes: Vec<u8>,
}

fn json_artifact<S: Serialize, R: Serialize>(
    name: &'static str,
    run: &RunInfo,
    spec: S,
    result: R,
) -> Result<Artifact, CliError> {
    let mut bytes = serde_json::to_vec_pretty(&Report { run, spec, result })
        .map_err(|e| CliError::Spec(format!("serializing {name}: {e}")))?;
    bytes.push(b'\n');
    Ok(Artifact { name, bytes })
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn load_configuration(path: &Path) -> Result<Configuration, CliError> {
    let cfg: Configuration = serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::Spec(format!("configuration {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn profile_for(n: usize, p: f64, tol: f64) -> Result<GroundStateProfile, CliError> {
    let params = ModelParams::new(n, p)?;
    log::info!("ground state n = {n}, p = {p}, tol = {tol:e}");
    Ok(solve_ground_state(params, tol)?)
}

fn positive(name: &str, v: f64) -> Result<f64, CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Spec(format!("{name} must be positive (got {v})")))
    }
}

#[derive(Serialize)]
struct GroundStateSpec {
    n: usize,
    p: f64,
    tol: f64,
}

#[derive(Serialize)]
struct GroundStateResult {
    w0: f64,
    tail_switch_radius: f64,
    asympt_c: f64,
    asymptotic_fit: AsymptoticFit,
    max_ode_residual: f64,
    profile_file: &'static str,
}

pub fn ground_state(run: &RunInfo, args: GroundStateArgs) -> Result<Vec<Artifact>, CliError> {
    let spec = GroundStateSpec {
        n: args.n.unwrap_or(1),
        p: args.p.unwrap_or(3.0),
        tol: positive("tol", args.tol.unwrap_or(1e-8))?,
    };
    let profile = profile_for(spec.n, spec.p, spec.tol)?;
    let result = GroundStateResult {
        w0: profile.w0,
        tail_switch_radius: profile.tail_switch_radius,
        asympt_c: profile.asympt_c,
        asymptotic_fit: asymptotic_constant(&profile)?,
        max_ode_residual: max_ode_residual(&profile),
        profile_file: "profile.json",
    };
    let mut profile_bytes = profile.to_json().into_bytes();
    profile_bytes.push(b'\n');
    Ok(vec![
        Artifact {
            name: "profile.json",
            bytes: profile_bytes,
        },
        json_artifact("ground_state.json", run, spec, result)?,
    ])
}

#[derive(Serialize)]
struct KernelSpec {
    n: usize,
    p: f64,
    a: f64,
    b: f64,
    separations: Vec<f64>,
    window: [f64; 2],
}

#[derive(Serialize)]
struct KernelResult {
    cbar_limit: f64,
    cbar_estimate: Option<CbarFit>,
    /// Why the windowed estimate was rejected, if it was.
    cbar_estimate_error: Option<String>,
    sweep: KernelReport,
}

pub fn kernel(run: &RunInfo, args: KernelArgs) -> Result<Vec<Artifact>, CliError> {
    let p = args.p.unwrap_or(3.0);
    let window = args.window.unwrap_or_else(|| vec![10.0, 20.0]);
    let window: [f64; 2] = window
        .try_into()
        .map_err(|_| CliError::Spec("window needs exactly two values lo,hi".into()))?;
    let spec = KernelSpec {
        n: args.n.unwrap_or(1),
        p,
        a: args.a.unwrap_or(p),
        b: args.b.unwrap_or(1.0),
        separations: args.separations.unwrap_or_else(|| vec![8.0, 10.0, 12.0]),
        window,
    };
    let profile = profile_for(spec.n, spec.p, 1e-8)?;
    let sweep = pair_integral_sweep(&profile, spec.a, spec.b, &spec.separations)?;
    let (cbar_estimate, cbar_estimate_error) = match cbar_estimate(&profile, spec.window) {
        Ok(fit) => (Some(fit), None),
        Err(e @ bumpkit::kernels::KernelError::WindowNotAsymptotic { .. }) => {
            (None, Some(e.to_string()))
        }
        Err(e) => return Err(e.into()),
    };
    let mut csv = b"D,pair_integral,normalized_ratio,tail_bound\n".to_vec();
    for i in 0..sweep.y_magnitudes.len() {
        writeln!(
            csv,
            "{},{:e},{:e},{:e}",
            sweep.y_magnitudes[i],
            sweep.raw_values[i],
            sweep.normalized_ratios[i],
            sweep.tail_bounds[i]
        )
        .expect("writing to memory");
    }
    let result = KernelResult {
        cbar_limit: cbar_limit(&profile),
        cbar_estimate,
        cbar_estimate_error,
        sweep,
    };
    Ok(vec![
        json_artifact("kernel.json", run, spec, result)?,
        Artifact {
            name: "kernel.csv",
            bytes: csv,
        },
    ])
}

#[derive(Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
enum RelaxInput {
    File {
        path: PathBuf,
    },
    Random {
        count: usize,
        dim: usize,
        period: f64,
    },
}

#[derive(Serialize)]
struct RelaxSpec {
    input: RelaxInput,
    options: RelaxOptions,
}

#[derive(Serialize)]
struct RelaxResult {
    initial: Configuration,
    relaxed: Configuration,
    status: RelaxStatus,
    iterations: usize,
    max_residual: f64,
    distances: Option<DistanceReport>,
}

fn random_torus(
    count: usize,
    dim: usize,
    period: f64,
    seed: u64,
) -> Result<Configuration, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<Vec<f64>> = (0..count)
        .map(|_| (0..dim).map(|_| rng.gen_range(0.0..period)).collect())
        .collect();
    points.sort_by(|a, b| a[0].total_cmp(&b[0]));
    Ok(Configuration::torus(vec![period; dim], points)?)
}

pub fn relax_cmd(run: &RunInfo, args: RelaxArgs) -> Result<Vec<Artifact>, CliError> {
    let options = RelaxOptions {
        step: positive("step", args.step.unwrap_or(0.5))?,
        residual_tol: positive("tol", args.tol.unwrap_or(1e-10))?,
        max_iters: args.max_iters.unwrap_or(20_000),
        ..RelaxOptions::default()
    };
    let (input, initial) = match (args.points, args.random) {
        (Some(path), None) => {
            let cfg = load_configuration(&path)?;
            (RelaxInput::File { path }, cfg)
        }
        (None, Some(count)) => {
            let dim = args.dim.unwrap_or(1);
            if !(1..=3).contains(&dim) || count < 2 {
                return Err(CliError::Spec(
                    "random relax needs dim in 1..=3 and at least 2 points".into(),
                ));
            }
            let period = positive("period", args.period.unwrap_or(10.0 * count as f64))?;
            let cfg = random_torus(count, dim, period, run.seed)?;
            (RelaxInput::Random { count, dim, period }, cfg)
        }
        _ => {
            return Err(CliError::Spec(
                "relax needs exactly one of --points or --random".into(),
            ))
        }
    };
    log::info!(
        "relax step = {}, tol = {:e}",
        options.step,
        options.residual_tol
    );
    let outcome = relax(&initial, &options)?;
    let mut csv = b"iter,max_residual,energy_logsum\n".to_vec();
    for row in &outcome.trace {
        writeln!(
            csv,
            "{},{:e},{:e}",
            row.iter, row.max_residual, row.energy_logsum
        )
        .expect("writing to memory");
    }
    let result = RelaxResult {
        max_residual: balance_residual(&outcome.config, outcome.config.n)?.max_residual(),
        distances: distances(&outcome.config).ok(),
        initial,
        relaxed: outcome.config,
        status: outcome.status,
        iterations: outcome.iterations,
    };
    Ok(vec![
        json_artifact("relax.json", run, RelaxSpec { input, options }, result)?,
        Artifact {
            name: "relax_trace.csv",
            bytes: csv,
        },
    ])
}

/// Parses `h=0.05,extent=36,bc=periodic`; `extent` may list one length per
/// axis separated by `x`. Dirichlet boxes are centered at the origin.
pub fn parse_grid(text: &str, n: usize) -> Result<GridSpec, CliError> {
    let bad = |m: String| CliError::Spec(format!("grid '{text}': {m}"));
    let (mut h, mut extent, mut bc) = (None, None, "periodic".to_string());
    for part in text.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got '{part}'")))?;
        match key.trim() {
            "h" => {
                h = Some(
                    value
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| bad(format!("h: {e}")))?,
                )
            }
            "extent" => {
                let lens = value
                    .split('x')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| bad(format!("extent: {e}")))?;
                extent = Some(lens);
            }
            "bc" => bc = value.trim().to_string(),
            other => return Err(bad(format!("unknown key '{other}'"))),
        }
    }
    let h = h.ok_or_else(|| bad("missing h".into()))?;
    let mut extent = extent.ok_or_else(|| bad("missing extent".into()))?;
    if extent.len() == 1 {
        extent = vec![extent[0]; n];
    }
    if extent.len() != n {
        return Err(bad(format!("{} extents for a {n}D problem", extent.len())));
    }
    let grid = match bc.as_str() {
        "periodic" => GridSpec::periodic(extent, h)?,
        "dirichlet" => GridSpec::dirichlet_box(extent.iter().map(|l| l / 2.0).collect(), h)?,
        other => return Err(bad(format!("unknown bc '{other}'"))),
    };
    Ok(grid)
}

#[derive(Serialize)]
struct SolveSpec {
    profile: Option<PathBuf>,
    n: usize,
    p: f64,
    centers: PathBuf,
    grid: GridSpec,
    newton: NewtonOptions,
}

#[derive(Serialize)]
struct SolveResult {
    iterations: usize,
    residual: f64,
    min_value: f64,
    nonnegative: bool,
    peaks: Option<Vec<Peak>>,
    trace: Vec<NewtonRow>,
    field_file: &'static str,
}

pub fn solve(run: &RunInfo, args: SolveArgs) -> Result<Vec<Artifact>, CliError> {
    let profile = match &args.profile {
        Some(path) => {
            let prof = GroundStateProfile::from_json(&read_text(path)?)?;
            let (n, p) = (prof.params.n, prof.params.p);
            if args.n.is_some_and(|v| v != n) || args.p.is_some_and(|v| v != p) {
                return Err(CliError::Spec(format!(
                    "--n/--p disagree with the profile (n = {n}, p = {p})"
                )));
            }
            prof
        }
        None => profile_for(args.n.unwrap_or(1), args.p.unwrap_or(3.0), 1e-8)?,
    };
    let (n, p) = (profile.params.n, profile.params.p);
    let centers_path = args
        .centers
        .ok_or_else(|| CliError::Spec("solve needs --centers".into()))?;
    let centers = load_configuration(&centers_path)?;
    let grid = parse_grid(
        args.grid
            .as_deref()
            .unwrap_or("h=0.05,extent=36,bc=periodic"),
        n,
    )?;
    grid.check_resolution(p)?;
    let newton = NewtonOptions {
        tol: positive("tol", args.tol.unwrap_or(1e-10))?,
        max_iters: args.max_iters.unwrap_or(60),
        ..NewtonOptions::default()
    };
    log::info!(
        "newton tol = {:e}, max_iters = {}",
        newton.tol,
        newton.max_iters
    );
    let ansatz = build_ansatz(&profile, &centers, &grid)?;
    let out = newton_solve(&ansatz, p, &newton)?;
    let mut field = Vec::new();
    out.field.write_binary(&mut field)?;
    let result = SolveResult {
        iterations: out.iterations,
        residual: out.residual,
        min_value: out.min_value,
        nonnegative: out.nonnegative,
        peaks: find_peaks(&out.field, DEFAULT_PEAK_THRESHOLD, DEFAULT_EXCLUSION_RADIUS).ok(),
        trace: out.trace,
        field_file: "field.bin",
    };
    let spec = SolveSpec {
        profile: args.profile,
        n,
        p,
        centers: centers_path,
        grid,
        newton,
    };
    Ok(vec![
        Artifact {
            name: "field.bin",
            bytes: field,
        },
        json_artifact("solve.json", run, spec, result)?,
    ])
}

#[derive(Serialize)]
struct SweepSpec {
    p: f64,
    separations: Vec<f64>,
    continuation: ContinuationConfig,
}

fn resolve_sweep(args: SweepArgs) -> Result<(SweepSpec, usize), CliError> {
    let layout = args.layout.as_deref().unwrap_or("ring");
    let mut config = ContinuationConfig::default();
    let n = match layout {
        "ring" => {
            config.layout = Layout::Ring {
                bumps: args.bumps.unwrap_or(3),
            };
            1
        }
        "square" => {
            config.layout = Layout::Square {
                per_side: args.bumps.unwrap_or(2),
            };
            config.offsets = vec![vec![0.0, 0.0], vec![0.2, -0.1], vec![-0.1, 0.15]];
            2
        }
        other => {
            return Err(CliError::Spec(format!(
                "unknown layout '{other}' (ring or square)"
            )))
        }
    };
    config.h = positive("h", args.h.unwrap_or(config.h))?;
    config.newton.tol = positive("tol", args.tol.unwrap_or(config.newton.tol))?;
    let spec = SweepSpec {
        p: args.p.unwrap_or(1.5),
        separations: args.separations.unwrap_or_else(|| vec![10.0, 12.0, 14.0]),
        continuation: config,
    };
    Ok((spec, n))
}

fn status_label(s: &EntryStatus) -> &'static str {
    match s {
        EntryStatus::Converged => "converged",
        EntryStatus::OutOfHypothesis(_) => "out_of_hypothesis",
        EntryStatus::Failed(_) => "failed",
    }
}

fn continuation_csv(entries: &[ContinuationEntry]) -> Vec<u8> {
    let mut csv = b"D,status,newton_iterations,newton_residual,max_balance_residual,spacing_deviation,max_orth_residual,sup_phi,sup_grad_phi\n".to_vec();
    for e in entries {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            e.d,
            status_label(&e.status),
            e.newton_iterations
                .map(|k| k.to_string())
                .unwrap_or_default(),
            csv_opt(e.newton_residual),
            csv_opt(e.max_balance_residual),
            csv_opt(e.spacing_deviation),
            csv_opt(e.max_orth_residual),
            csv_opt(e.sup_phi),
            csv_opt(e.sup_grad_phi),
        )
        .expect("writing to memory");
    }
    csv
}

pub fn continuation(run: &RunInfo, args: SweepArgs) -> Result<Vec<Artifact>, CliError> {
    let (spec, n) = resolve_sweep(args)?;
    let profile = profile_for(n, spec.p, 1e-8)?;
    let report = separation_continuation(&profile, &spec.separations, &spec.continuation)?;
    let csv = continuation_csv(&report.entries);
    Ok(vec![
        json_artifact("continuation.json", run, &spec, &report.entries)?,
        Artifact {
            name: "continuation.csv",
            bytes: csv,
        },
    ])
}

pub fn pipeline(run: &RunInfo, args: SweepArgs) -> Result<Vec<Artifact>, CliError> {
    let (spec, n) = resolve_sweep(args)?;
    let profile = profile_for(n, spec.p, 1e-8)?;
    let summary = reproduce_theorem_pipeline(&profile, &spec.separations, &spec.continuation)?;
    let mut csv = Vec::new();
    write_pipeline_csv(&summary.rows, &mut csv).expect("writing to memory");
    Ok(vec![
        json_artifact("pipeline.json", run, &spec, &summary)?,
        Artifact {
            name: "pipeline.csv",
            bytes: csv,
        },
    ])
}

#[derive(Serialize)]
struct VerifySpec {
    points: PathBuf,
    tol: f64,
}

#[derive(Serialize)]
struct VerifyResult {
    distances: DistanceReport,
    neighbor_sets: Vec<Vec<usize>>,
    all_pass: bool,
    check: TheoremCheck,
}

pub fn verify(run: &RunInfo, args: VerifyArgs) -> Result<Vec<Artifact>, CliError> {
    let points = args
        .points
        .ok_or_else(|| CliError::Spec("verify needs --points".into()))?;
    let tol = positive("tol", args.tol.unwrap_or(1e-10))?;
    let config = load_configuration(&points)?;
    let check = verify_theorem(&config, tol)?;
    let result = VerifyResult {
        distances: distances(&config)?,
        neighbor_sets: nearest_sets(&config, DEFAULT_NEAREST_TOL)?
            .iter()
            .map(|s| s.iter().map(|r| r.index).collect())
            .collect(),
        all_pass: check.all_pass(),
        check,
    };
    Ok(vec![json_artifact(
        "verify.json",
        run,
        VerifySpec { points, tol },
        result,
    )?])
}
