use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by configuration loading, the numerical kernels and the
/// scenario harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {what}: {source}")]
    Parse {
        what: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid value for `{field}`: {reason}")]
    Validation { field: &'static str, reason: String },

    #[error("state diverged at substep {substep} (|x| = {magnitude:.3e} mol/L); reduce the integration step")]
    Divergence { substep: usize, magnitude: f64 },

    #[error("steady state did not converge at u = {u} L/h, p = {p} L/h (best residual {residual:.3e} mol/L/h)")]
    SteadyState { u: f64, p: f64, residual: f64 },

    #[error(
        "raffinate tolerance is not bracketed on [{u_lo}, {u_hi}] L/h \
         (raffinate {raffinate_lo:.3e} .. {raffinate_hi:.3e} mol/L, tolerance {tol:.3e})"
    )]
    Bracket {
        u_lo: f64,
        u_hi: f64,
        raffinate_lo: f64,
        raffinate_hi: f64,
        tol: f64,
    },

    #[error("PID tuning failed: {0}")]
    Tuning(String),

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("result mismatch: {0}")]
    Mismatch(String),

    #[error("CSV output failed: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Validation {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    /// True for configuration problems (as opposed to numerical failures).
    pub fn is_configuration(&self) -> bool {
        match self {
            Error::Io { .. } | Error::Parse { .. } | Error::Validation { .. } => true,
            Error::AtStep { source, .. } => source.is_configuration(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
