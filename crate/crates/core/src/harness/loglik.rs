use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::run::{repetition_seed, FILTER_STREAM, INIT_STREAM};
use super::twin::{filter_model, observation_operator, two_scale_system, two_scale_twin, TwinData};
use super::HarnessError;
use crate::filters::{enkf_analysis, innovation_moments};
use crate::models::Dynamics;
use crate::online_em::OnlineEmError;
use crate::statespace::{gaussian_loglik, gaussian_noise, sample_mvn, Ensemble, ObservationOperator, SeededRng, SpdMatrix};
use crate::Scalar;

/// One EnKF pass with `Q` held fixed. Returns the summed innovation
/// log-density `Σ log N(y_k; H x̄ᶠ_k, H P̂ᶠ_k Hᵀ + R)` and, when a truth is
/// given (`x_0..x_K`), the analysis RMSE over all cycles.
pub fn enkf_loglik<T, D, H, R>(
    model: &D,
    h_op: &H,
    q: &SpdMatrix<T>,
    r: &SpdMatrix<T>,
    initial: Ensemble<T>,
    obs: &[DVector<T>],
    truth: Option<&[DVector<T>]>,
    rng: &mut R,
) -> Result<(T, Option<T>), HarnessError>
where
    T: Scalar,
    D: Dynamics<T> + ?Sized,
    H: ObservationOperator<T> + ?Sized,
    R: Rng + ?Sized,
{
    if let Some(t) = truth {
        if t.len() != obs.len() + 1 {
            return Err(HarnessError::Config(format!(
                "truth has {} states for {} observations",
                t.len(),
                obs.len()
            )));
        }
    }
    let at = |k: usize, e: crate::filters::FilterError| HarnessError::Cycle {
        k,
        source: OnlineEmError::from(e),
    };
    let n_p = initial.n_p();
    let mut ens = initial;
    let mut total = T::zero();
    let mut sq = T::zero();
    for (i, y) in obs.iter().enumerate() {
        let k = i + 1;
        let prop = model
            .propagate_columns(ens.members())
            .map_err(|e| HarnessError::Cycle { k, source: e.into() })?;
        let noise = gaussian_noise(q, n_p, rng)?;
        let forecast = Ensemble::new(prop + noise).map_err(|e| at(k, e.into()))?;
        let (hmean, s) = innovation_moments(&forecast, h_op, r).map_err(|e| at(k, e))?;
        total += gaussian_loglik(y, &hmean, &s).map_err(|e| at(k, e.into()))?;
        ens = enkf_analysis(&forecast, y, h_op, r, rng).map_err(|e| at(k, e))?;
        if let Some(t) = truth {
            sq += (ens.mean() - &t[k]).norm_squared();
        }
    }
    let rmse = truth.map(|t| (sq / T::from_count(obs.len() * t[0].len())).sqrt());
    Ok((total, rmse))
}

/// [`enkf_loglik`] on twin data with the configured model, starting from
/// `x_0 + N(0, q0·I)` drawn from `rng`. Returns `(loglik, rmse)`.
pub fn approx_loglik<R: Rng + ?Sized>(
    q_fixed: &SpdMatrix<f64>,
    r: &SpdMatrix<f64>,
    data: &TwinData,
    config: &ExperimentConfig,
    rng: &mut R,
) -> Result<(f64, f64), HarnessError> {
    let model = filter_model(config)?;
    let h = observation_operator(config);
    let init = sample_mvn(
        &data.truth[0],
        &SpdMatrix::scaled_identity(config.state_dim(), config.q0),
        rng,
        config.n_particles,
    )?;
    let (ll, rmse) = enkf_loglik(model.as_ref(), &h, q_fixed, r, init, &data.obs, Some(&data.truth), rng)?;
    Ok((ll, rmse.expect("truth supplied")))
}

/// `a:b:n` as `n` evenly spaced values from `a` to `b`; `n = 1` gives `[a]`.
pub fn parse_grid(text: &str) -> Result<Vec<f64>, HarnessError> {
    let bad = || HarnessError::Config(format!("grid `{text}` is not of the form a:b:n"));
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let a: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let b: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if n == 0 || !a.is_finite() || !b.is_finite() {
        return Err(bad());
    }
    if n == 1 {
        return Ok(vec![a]);
    }
    Ok((0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect())
}

/// One node of a log-likelihood surface; failed nodes carry `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoglikPoint {
    pub sigma_q2: f64,
    pub sigma_r2: f64,
    pub loglik: Option<f64>,
    pub rmse: Option<f64>,
}

/// [`approx_loglik`] at `Q = σ_Q² I`, `R = σ_R² I` for every grid node, on
/// the data of repetition 0. Every node reuses the same random numbers.
pub fn loglik_surface(config: &ExperimentConfig, qgrid: &[f64], rgrid: &[f64]) -> Result<Vec<LoglikPoint>, HarnessError> {
    config.validate()?;
    if qgrid.is_empty() || rgrid.is_empty() || qgrid.iter().chain(rgrid).any(|v| !v.is_finite()) {
        return Err(HarnessError::Config("grids must be non-empty and finite".into()));
    }
    let data = super::run::repetition_data(config, 0)?;
    let seed = repetition_seed(config, 0);
    let n = config.state_dim();
    let mut out = Vec::with_capacity(qgrid.len() * rgrid.len());
    for &sq in qgrid {
        for &sr in rgrid {
            let mut rng = SeededRng::new(seed, FILTER_STREAM);
            let node = approx_loglik(
                &SpdMatrix::scaled_identity(n, sq),
                &SpdMatrix::scaled_identity(n, sr),
                &data,
                config,
                &mut rng,
            );
            let (loglik, rmse) = match node {
                Ok((l, e)) if l.is_finite() => (Some(l), Some(e)),
                Ok(_) => (None, None),
                Err(e) => {
                    log::warn!("surface node ({sq}, {sr}) failed: {e}");
                    (None, None)
                }
            };
            out.push(LoglikPoint {
                sigma_q2: sq,
                sigma_r2: sr,
                loglik,
                rmse,
            });
        }
    }
    Ok(out)
}

/// Writes a surface as CSV (`sigma_q2,sigma_r2,loglik,rmse`), NaN for
/// missing values.
pub fn write_surface_csv(path: &Path, points: &[LoglikPoint]) -> Result<(), HarnessError> {
    #[derive(Serialize)]
    struct Row {
        sigma_q2: f64,
        sigma_r2: f64,
        loglik: f64,
        rmse: f64,
    }
    let io = |e: csv::Error| HarnessError::Io(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for p in points {
        w.serialize(Row {
            sigma_q2: p.sigma_q2,
            sigma_r2: p.sigma_r2,
            loglik: p.loglik.unwrap_or(f64::NAN),
            rmse: p.rmse.unwrap_or(f64::NAN),
        })
        .map_err(io)?;
    }
    w.flush().map_err(|e| HarnessError::Io(e.to_string()))
}

/// Score of one candidate multiple in the reference grid search.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub multiple: f64,
    pub loglik: Option<f64>,
    pub rmse: Option<f64>,
}

/// Reference model-error covariance of the one-scale model under the
/// two-scale truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCovariance {
    /// Sample covariance of the omitted coupling forcing, per model step.
    pub forcing_covariance: DMatrix<f64>,
    /// Chosen `multiple · Δt² · forcing_covariance`.
    pub matrix: DMatrix<f64>,
    pub multiple: f64,
    pub candidates: Vec<Candidate>,
}

/// Multiples searched by default: 0.1, 0.2, …, 3.0.
pub fn default_multiples() -> Vec<f64> {
    (1..=30).map(|i| i as f64 / 10.0).collect()
}

/// Runs the two-scale truth, takes the sample covariance `C` of the coupling
/// forcing `−(hc/b)·ΣY` at every model step, and scores the candidates
/// `m·Δt²·C` with one EnKF pass each. The winner has the largest
/// log-likelihood, ties broken by the smaller RMSE.
pub fn reference_covariance_two_scale<R: Rng + Clone>(
    config: &ExperimentConfig,
    multiples: &[f64],
    rng: &mut R,
) -> Result<ReferenceCovariance, HarnessError> {
    config.validate()?;
    if !config.is_two_scale() {
        return Err(HarnessError::Config("reference covariance needs a two-scale configuration".into()));
    }
    if multiples.is_empty() || multiples.iter().any(|m| !m.is_finite() || *m < 0.0) {
        return Err(HarnessError::Config("multiples must be non-empty, finite and non-negative".into()));
    }
    let system = two_scale_system(config)?;
    let n = config.state_dim();
    let mut sum = DVector::<f64>::zeros(n);
    let mut outer = DMatrix::<f64>::zeros(n, n);
    let mut count = 0usize;
    let data = two_scale_twin(config, rng, |state| {
        let f = system.coupling_forcing(&state.as_slice()[n..]);
        sum += &f;
        outer += &f * f.transpose();
        count += 1;
    })?;
    let c = if count < 2 {
        DMatrix::zeros(n, n)
    } else {
        let mean = &sum / count as f64;
        (outer - &mean * mean.transpose() * count as f64) / (count - 1) as f64
    };
    let c = crate::statespace::symmetrize(&c);
    let dt = config.cycle_length;

    let mut candidates = Vec::with_capacity(multiples.len());
    for &m in multiples {
        let q = SpdMatrix::new(&c * (m * dt * dt))?;
        let mut node_rng = rng.clone();
        let score = approx_loglik(&q, &SpdMatrix::scaled_identity(n, config.r0()), &data, config, &mut node_rng);
        let (loglik, rmse) = match score {
            Ok((l, e)) if l.is_finite() => (Some(l), Some(e)),
            Ok(_) => (None, None),
            Err(e) => {
                log::warn!("candidate {m}: {e}");
                (None, None)
            }
        };
        candidates.push(Candidate { multiple: m, loglik, rmse });
    }
    let best = candidates
        .iter()
        .filter(|c| c.loglik.is_some())
        .max_by(|a, b| {
            a.loglik
                .partial_cmp(&b.loglik)
                .expect("finite")
                .then_with(|| b.rmse.partial_cmp(&a.rmse).expect("finite"))
        })
        .or_else(|| (candidates.len() == 1).then(|| &candidates[0]))
        .ok_or_else(|| HarnessError::Config("every candidate multiple failed".into()))?;
    let multiple = best.multiple;
    Ok(ReferenceCovariance {
        matrix: &c * (multiple * dt * dt),
        forcing_covariance: c,
        multiple,
        candidates,
    })
}

/// [`reference_covariance_two_scale`] with the default multiples and the
/// repetition-0 filter stream.
pub fn reference_q(config: &ExperimentConfig) -> Result<ReferenceCovariance, HarnessError> {
    let mut rng = SeededRng::new(repetition_seed(config, 0), INIT_STREAM);
    reference_covariance_two_scale(config, &default_multiples(), &mut rng)
}
