//! Error type of the command-line driver and its exit-code mapping.

use std::path::PathBuf;

use bumpkit::ground_state::GroundStateError;
use bumpkit::kernels::KernelError;
use bumpkit::particles::ParticleError;
use bumpkit::pde::PdeError;
use bumpkit::pipeline::PipelineError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("spec error: {0}")]
    Spec(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numerical failure ({module}): {message}")]
    Numerical {
        module: &'static str,
        message: String,
    },
}

impl CliError {
    /// 2 for bad input or files, 3 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Spec(_) | CliError::Io { .. } => 2,
            CliError::Numerical { .. } => 3,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    fn numerical(module: &'static str, e: impl std::fmt::Display) -> Self {
        CliError::Numerical {
            module,
            message: e.to_string(),
        }
    }
}

impl From<GroundStateError> for CliError {
    fn from(e: GroundStateError) -> Self {
        match e {
            GroundStateError::InvalidParams(_) | GroundStateError::MalformedProfile(_) => {
                CliError::Spec(format!("ground_state: {e}"))
            }
            _ => CliError::numerical("ground_state", e),
        }
    }
}

impl From<KernelError> for CliError {
    fn from(e: KernelError) -> Self {
        match e {
            KernelError::TruncationWarning { .. } | KernelError::WindowNotAsymptotic { .. } => {
                CliError::numerical("interaction_kernels", e)
            }
            _ => CliError::Spec(format!("interaction_kernels: {e}")),
        }
    }
}

impl From<ParticleError> for CliError {
    fn from(e: ParticleError) -> Self {
        CliError::Spec(format!("particle_system: {e}"))
    }
}

impl From<PdeError> for CliError {
    fn from(e: PdeError) -> Self {
        match e {
            PdeError::InvalidGrid(_)
            | PdeError::Underresolved { .. }
            | PdeError::CenterOutOfDomain { .. }
            | PdeError::DimensionMismatch { .. }
            | PdeError::Io(_)
            | PdeError::Format(_) => CliError::Spec(format!("pde_solver: {e}")),
            _ => CliError::numerical("pde_solver", e),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::InvalidSetup(m) => CliError::Spec(format!("pipeline: {m}")),
            PipelineError::Pde(e) => e.into(),
            PipelineError::Io(e) => CliError::numerical("pipeline", e),
        }
    }
}
