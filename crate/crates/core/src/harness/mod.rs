//! Twin experiments on the Lorenz systems, log-likelihood surfaces and the
//! linear-Gaussian oracle battery.

mod config;
mod loglik;
pub mod oracle;
mod run;
mod twin;

use thiserror::Error;

use crate::filters::FilterError;
use crate::models::ModelError;
use crate::online_em::OnlineEmError;
use crate::reference::ReferenceError;
use crate::statespace::StateSpaceError;

pub use config::{
    lorenz63_default, lorenz96_banded_default, two_scale_default, vmpf_filter, ExperimentConfig, ModelConfig,
    TrueQConfig,
};
pub use loglik::{
    approx_loglik, default_multiples, enkf_loglik, loglik_surface, parse_grid, reference_covariance_two_scale,
    reference_q, write_surface_csv, Candidate, LoglikPoint, ReferenceCovariance,
};
pub use run::{
    metrics_rmse, repetition_data, repetition_seed, run_experiment, run_repetition, run_repetition_with,
    summarize_covariance, thread_count, write_outputs, CovarianceSummary, CycleRecord, ExperimentResult,
    RepetitionResult, FILTER_STREAM, INIT_STREAM, TRUTH_STREAM,
};
pub use twin::{
    banded_matrix, filter_model, generate_truth_and_obs, observation_operator, sigmoid_scale, true_q_at, TwinData,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("cycle {k}: {source}")]
    Cycle {
        k: usize,
        #[source]
        source: OnlineEmError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    StateSpace(#[from] StateSpaceError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    OnlineEm(#[from] OnlineEmError),
    #[error(transparent)]
    Reference(#[from] ReferenceError),
}

impl HarnessError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Io(_) => "io",
            HarnessError::Cycle { .. } => "cycle",
            HarnessError::Model(_) => "model",
            HarnessError::StateSpace(_) => "statespace",
            HarnessError::Filter(_) => "filter",
            HarnessError::OnlineEm(_) => "online_em",
            HarnessError::Reference(_) => "reference",
        }
    }
}
