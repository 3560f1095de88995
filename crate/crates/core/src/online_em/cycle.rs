use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::stats::{is_stats_from_propagated, m_step, oss_stats, update_stats, SufficientStats};
use super::{EstimatorKind, OnlineEmError, StepSchedule};
use crate::filters::{enkf_analysis, enks_one_step, vmpf_step, FilterCycleState, VmpfSpec};
use crate::models::Dynamics;
use crate::statespace::{gaussian_noise, Ensemble, ObservationOperator, SpdMatrix};
use crate::Scalar;

/// Filter producing the analysis ensemble each cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FilterKind {
    Enkf,
    Vmpf {
        #[serde(default)]
        spec: VmpfSpec,
    },
}

/// Configuration of the estimator loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnlineEmSpec {
    pub estimator: EstimatorKind,
    pub filter: FilterKind,
    pub schedule: StepSchedule,
    /// Estimate `R` alongside `Q`; otherwise `R` stays at its initial value.
    pub estimate_r: bool,
}

impl OnlineEmSpec {
    pub fn validate(&self) -> Result<(), OnlineEmError> {
        self.estimator.validate()?;
        self.schedule.validate()?;
        if let FilterKind::Vmpf { spec } = &self.filter {
            spec.validate()?;
        }
        Ok(())
    }
}

/// Why a cycle kept the previous statistic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SkipReason {
    /// Effective sample size of the importance weights fell below 2.
    LowEffectiveSampleSize(f64),
    DegenerateWeights { max_log_weight: f64 },
}

/// What happened in one cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleDiagnostics {
    pub k: usize,
    pub gamma: f64,
    /// Effective sample size of the importance weights (importance sampling only).
    pub ess: Option<f64>,
    pub skipped: Option<SkipReason>,
    pub vmpf_iterations: Option<usize>,
}

/// Estimator state carried between cycles: the analysis ensemble, the running
/// statistic and the current parameter estimates.
#[derive(Debug, Clone)]
pub struct OnlineEm<T: Scalar> {
    spec: OnlineEmSpec,
    analysis: Ensemble<T>,
    stats: SufficientStats<T>,
    q: SpdMatrix<T>,
    r: SpdMatrix<T>,
    k: usize,
}

impl<T: Scalar> OnlineEm<T> {
    /// Starts from the first guess `(Q₀, R₀)`, which is also the initial
    /// statistic.
    pub fn new(spec: OnlineEmSpec, initial: Ensemble<T>, q0: SpdMatrix<T>, r0: SpdMatrix<T>) -> Result<Self, OnlineEmError> {
        spec.validate()?;
        if initial.n_p() < 2 {
            return Err(OnlineEmError::InvalidConfig("need at least 2 ensemble members".into()));
        }
        if q0.dim() != initial.n_x() {
            return Err(OnlineEmError::DimensionMismatch("Q0 does not match the state dimension".into()));
        }
        let q0 = q0.with_jitter_policy()?;
        let r0 = r0.with_jitter_policy()?;
        let stats = SufficientStats::from_parameters(&q0, spec.estimate_r.then_some(&r0));
        Ok(Self {
            spec,
            analysis: initial,
            stats,
            q: q0,
            r: r0,
            k: 0,
        })
    }

    pub fn spec(&self) -> &OnlineEmSpec {
        &self.spec
    }

    pub fn analysis(&self) -> &Ensemble<T> {
        &self.analysis
    }

    pub fn q(&self) -> &SpdMatrix<T> {
        &self.q
    }

    pub fn r(&self) -> &SpdMatrix<T> {
        &self.r
    }

    pub fn stats(&self) -> &SufficientStats<T> {
        &self.stats
    }

    /// Number of completed cycles.
    pub fn cycles(&self) -> usize {
        self.k
    }

    /// Assimilates `y` and updates the parameters.
    ///
    /// The forecast and analysis use `Q̂_{K−1}` and `R̂_{K−1}`; the new
    /// estimates take effect from the next cycle.
    pub fn cycle<D, H, R>(&mut self, y: &DVector<T>, model: &D, h_op: &H, rng: &mut R) -> Result<CycleDiagnostics, OnlineEmError>
    where
        D: Dynamics<T> + ?Sized,
        H: ObservationOperator<T> + ?Sized,
        R: Rng + ?Sized,
    {
        let k = self.k + 1;
        let n_p = self.analysis.n_p();
        let propagated = model.propagate_columns(self.analysis.members())?;
        let forecast = Ensemble::new(&propagated + gaussian_noise(&self.q, n_p, rng)?)?;

        let mut vmpf_iterations = None;
        let analysis = match &self.spec.filter {
            FilterKind::Enkf => enkf_analysis(&forecast, y, h_op, &self.r, rng)?,
            FilterKind::Vmpf { spec } => {
                let (a, trace) = vmpf_step(&forecast, &propagated, y, h_op, &self.r, &self.q, spec)?;
                vmpf_iterations = Some(trace.iterations());
                a
            }
        };

        let include_r = self.spec.estimate_r;
        let mut ess = None;
        let mut skipped = None;
        let new_stats = match self.spec.estimator {
            EstimatorKind::Is { m_p } => {
                match is_stats_from_propagated(&propagated, &self.q, y, h_op, &self.r, m_p, include_r, rng) {
                    Ok((s, d)) => {
                        ess = Some(d.ess);
                        if d.ess < 2.0 {
                            skipped = Some(SkipReason::LowEffectiveSampleSize(d.ess));
                        }
                        Some(s)
                    }
                    Err(OnlineEmError::DegenerateWeights { max_log_weight }) => {
                        skipped = Some(SkipReason::DegenerateWeights { max_log_weight });
                        None
                    }
                    Err(e) => return Err(e),
                }
            }
            EstimatorKind::Oss => {
                let prev = std::mem::replace(&mut self.analysis, analysis.clone());
                let state = FilterCycleState::new(prev, forecast, analysis.clone(), y.clone())?;
                let smoothed = enks_one_step(&state)?;
                Some(oss_stats(&smoothed, &analysis, y, model, h_op, include_r)?)
            }
        };
        self.analysis = analysis;

        let gamma = self.spec.schedule.step_size(k);
        if let (Some(s), None) = (new_stats, skipped) {
            let updated = update_stats(&self.stats, &s, gamma)?;
            let (q, r) = m_step(&updated)?;
            self.stats = updated;
            self.q = q;
            if let Some(r) = r {
                self.r = r;
            }
        } else if let Some(reason) = skipped {
            log::debug!("cycle {k}: statistic update skipped ({reason:?})");
        }
        self.k = k;
        Ok(CycleDiagnostics {
            k,
            gamma,
            ess,
            skipped,
            vmpf_iterations,
        })
    }
}

/// One full cycle of [`OnlineEm`]: forecast, analysis, statistic, blend and
/// maximization.
pub fn run_online_em_cycle<T, D, H, R>(
    state: &mut OnlineEm<T>,
    y: &DVector<T>,
    model: &D,
    h_op: &H,
    rng: &mut R,
) -> Result<CycleDiagnostics, OnlineEmError>
where
    T: Scalar,
    D: Dynamics<T> + ?Sized,
    H: ObservationOperator<T> + ?Sized,
    R: Rng + ?Sized,
{
    state.cycle(y, model, h_op, rng)
}
