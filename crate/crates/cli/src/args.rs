//! Command-line and config-file parameters.
//!
//! Every subcommand field is optional on both sides; a value given on the
//! command line wins over the config file, which wins over the built-in
//! default.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "bumpkit",
    version,
    about = "Multi-bump solutions of -Δu + u = u^p: solvers and checks"
)]
pub struct Cli {
    /// Directory for reports and tables.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Seed for randomized initial configurations.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel loops.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON config file with global keys and one section per subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for the radial ground state W.
    GroundState(GroundStateArgs),
    /// Pair-interaction integrals and the constant c̄.
    Kernel(KernelArgs),
    /// Relax a point configuration to a balanced state.
    Relax(RelaxArgs),
    /// Newton solve of the PDE from a multi-bump ansatz.
    Solve(SolveArgs),
    /// Separation continuation on a torus.
    Continuation(SweepArgs),
    /// Check the balance law on a point configuration.
    Verify(VerifyArgs),
    /// End-to-end sweep: solve, extract, decompose and tabulate.
    Pipeline(SweepArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GroundState(_) => "ground-state",
            Command::Kernel(_) => "kernel",
            Command::Relax(_) => "relax",
            Command::Solve(_) => "solve",
            Command::Continuation(_) => "continuation",
            Command::Verify(_) => "verify",
            Command::Pipeline(_) => "pipeline",
        }
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundStateArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<f64>,
    /// Tolerance on the ODE residual.
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<f64>,
    /// Exponent on the near factor (defaults to p).
    #[arg(long)]
    pub a: Option<f64>,
    /// Exponent on the shifted factor.
    #[arg(long)]
    pub b: Option<f64>,
    /// Shift magnitudes |y| for the pair-integral sweep.
    #[arg(long, value_delimiter = ',')]
    pub separations: Option<Vec<f64>>,
    /// Window `lo,hi` for the c̄ fit.
    #[arg(long, value_delimiter = ',')]
    pub window: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaxArgs {
    /// Configuration JSON to relax.
    #[arg(long)]
    pub points: Option<PathBuf>,
    /// Draw this many random points on a torus instead.
    #[arg(long)]
    pub random: Option<usize>,
    /// Dimension of the random torus.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Side length of the random torus.
    #[arg(long)]
    pub period: Option<f64>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveArgs {
    /// Profile JSON from `ground-state`; solved on the fly when absent.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<f64>,
    /// Configuration JSON with the bump centers.
    #[arg(long)]
    pub centers: Option<PathBuf>,
    /// Grid as `h=<spacing>,extent=<L>[x<L>],bc=periodic|dirichlet`.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepArgs {
    #[arg(long)]
    pub p: Option<f64>,
    /// Separations D, in increasing order.
    #[arg(long, value_delimiter = ',')]
    pub separations: Option<Vec<f64>>,
    /// `ring` (1D) or `square` (2D).
    #[arg(long)]
    pub layout: Option<String>,
    /// Bumps on the ring, or bumps per side of the square.
    #[arg(long)]
    pub bumps: Option<usize>,
    #[arg(long)]
    pub h: Option<f64>,
    /// Newton tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyArgs {
    /// Configuration JSON to check.
    #[arg(long)]
    pub points: Option<PathBuf>,
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ConfigFile {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub ground_state: Option<GroundStateArgs>,
    pub kernel: Option<KernelArgs>,
    pub relax: Option<RelaxArgs>,
    pub solve: Option<SolveArgs>,
    pub continuation: Option<SweepArgs>,
    pub verify: Option<VerifyArgs>,
    pub pipeline: Option<SweepArgs>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Spec(format!("config {}: {e}", path.display())))
    }
}

/// Field-wise `self` over `fallback`.
pub trait Overlay: Sized {
    fn overlay(self, fallback: Option<Self>) -> Self;
}

macro_rules! overlay {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl Overlay for $ty {
            fn overlay(self, fallback: Option<Self>) -> Self {
                let fb = fallback.unwrap_or_default();
                Self { $($field: self.$field.or(fb.$field)),* }
            }
        }
    };
}

overlay!(GroundStateArgs { n, p, tol });
overlay!(KernelArgs {
    n,
    p,
    a,
    b,
    separations,
    window
});
overlay!(RelaxArgs {
    points,
    random,
    dim,
    period,
    step,
    tol,
    max_iters
});
overlay!(SolveArgs {
    profile,
    n,
    p,
    centers,
    grid,
    tol,
    max_iters
});
overlay!(SweepArgs {
    p,
    separations,
    layout,
    bumps,
    h,
    tol
});
overlay!(VerifyArgs { points, tol });
