//! Ensemble filters and the one-step smoother used by the estimator.

mod enkf;
mod enks;
mod vmpf;

use thiserror::Error;

use crate::statespace::StateSpaceError;

pub use enkf::{enkf_analysis, enkf_gain, innovation_moments};
pub use enks::{enks_one_step, pseudo_inverse, smoother_gain, FilterCycleState};
pub use vmpf::{vmpf_step, VmpfSpec, VmpfTarget, VmpfTrace};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum FilterError {
    #[error("need at least 2 ensemble members, got {0}")]
    TooFewMembers(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("filter diverged: {0}")]
    Diverged(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
    #[error("VMPF mapping diverged after {} iterations", trace.iterations())]
    VmpfDiverged { trace: VmpfTrace },
    #[error(transparent)]
    StateSpace(#[from] StateSpaceError),
}
