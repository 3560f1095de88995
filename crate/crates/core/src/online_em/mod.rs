//! Online expectation-maximization for the model error covariance `Q` (and
//! optionally the observation error covariance `R`).
//!
//! Each cycle forms a Monte Carlo estimate of the expected sufficient
//! statistic under the joint smoothing density of `(x_{K−1}, x_K)`, blends it
//! into the running statistic with a decreasing step size and maps the result
//! back to parameters.

mod cycle;
mod stats;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filters::FilterError;
use crate::models::ModelError;
use crate::statespace::StateSpaceError;

pub use cycle::{run_online_em_cycle, CycleDiagnostics, FilterKind, OnlineEm, OnlineEmSpec, SkipReason};
pub use stats::{
    is_stats, is_stats_from_propagated, m_step, normalize_log_weights, oss_stats, update_stats, ImportanceDiagnostics,
    SufficientStats,
};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum OnlineEmError {
    #[error("importance weights are degenerate (max log-weight {max_log_weight})")]
    DegenerateWeights { max_log_weight: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid estimator configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    StateSpace(#[from] StateSpaceError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Step sizes `γ_k = (k + offset)^{−α}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSchedule {
    pub alpha: f64,
    #[serde(default)]
    pub offset: usize,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self { alpha: 0.6, offset: 0 }
    }
}

impl StepSchedule {
    pub fn new(alpha: f64, offset: usize) -> Result<Self, OnlineEmError> {
        let s = Self { alpha, offset };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), OnlineEmError> {
        if !(self.alpha > 0.5 && self.alpha < 1.0) {
            return Err(OnlineEmError::InvalidConfig(format!(
                "step-size exponent must lie in (0.5, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// `γ_k` for cycle `k ≥ 1`.
    pub fn step_size(&self, k: usize) -> f64 {
        assert!(k >= 1, "cycle index starts at 1");
        ((k + self.offset) as f64).powf(-self.alpha)
    }
}

/// Free-function form of [`StepSchedule::step_size`].
pub fn step_size(k: usize, sched: &StepSchedule) -> f64 {
    sched.step_size(k)
}

/// How the expected statistic is approximated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EstimatorKind {
    /// Importance sampling with `m_p` transition draws per analysis particle.
    Is { m_p: usize },
    /// Pairs from the one-step ensemble smoother.
    Oss,
}

impl EstimatorKind {
    pub fn validate(&self) -> Result<(), OnlineEmError> {
        match self {
            EstimatorKind::Is { m_p: 0 } => Err(OnlineEmError::InvalidConfig("m_p must be at least 1".into())),
            _ => Ok(()),
        }
    }
}
