//! Linear-Gaussian checks of the filters and estimators against the exact
//! Kalman, RTS and batch-EM results.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::HarnessError;
use crate::filters::{enkf_analysis, enks_one_step, FilterCycleState};
use crate::models::LinearMap;
use crate::online_em::{is_stats, oss_stats, EstimatorKind, FilterKind, OnlineEm, OnlineEmSpec, StepSchedule};
use crate::reference::{batch_em, kalman_filter, pair_statistic, rts_smoother, LinearGaussianModel};
use crate::statespace::{gaussian_noise, sample_mvn, Ensemble, IdentityObservation, SeededRng, SpdMatrix};

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn report(name: &str, passed: bool, detail: String) -> OracleReport {
    OracleReport {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Mean and standard error of replicate values.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Two-dimensional model with correlated model error, fully observed.
pub fn bivariate_model() -> LinearGaussianModel<f64> {
    LinearGaussianModel::new(
        DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]),
        DMatrix::identity(2, 2),
        SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.2])).expect("symmetric"),
        SpdMatrix::scaled_identity(2, 0.5),
        DVector::zeros(2),
        SpdMatrix::scaled_identity(2, 1.0),
    )
    .expect("consistent shapes")
}

/// `x_k = 0.9 x_{k−1} + η`, `y_k = x_k + ν`, `q = 0.3`, `r = 0.5`.
pub fn scalar_model() -> LinearGaussianModel<f64> {
    LinearGaussianModel::scalar(0.9, 1.0, 0.3, 0.5, 0.0, 1.0)
}

/// Batch-EM log-likelihood never decreases (by more than 1e-9) over 30
/// iterations, estimating both `Q` and `R`.
pub fn check_batch_em_monotone(seed: u64) -> Result<OracleReport, HarnessError> {
    let model = bivariate_model();
    let (_, obs) = model.simulate(500, &mut SeededRng::new(seed, 0))?;
    let trace = batch_em(
        &model,
        &obs,
        SpdMatrix::scaled_identity(2, 1.0),
        SpdMatrix::scaled_identity(2, 1.0),
        30,
        true,
    )?;
    let worst = trace
        .loglik
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    Ok(report(
        "batch EM monotone",
        worst >= -1e-9,
        format!(
            "loglik {:.4} -> {:.4}, smallest increment {worst:.3e}",
            trace.loglik[0],
            trace.loglik[30]
        ),
    ))
}

/// Batch-EM iterated from `(q0, R)` until the relative change of `Q` drops
/// below `tol`, `R` held at its true value.
pub fn batch_em_fixed_point(
    model: &LinearGaussianModel<f64>,
    obs: &[DVector<f64>],
    q0: SpdMatrix<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<(SpdMatrix<f64>, usize), HarnessError> {
    let mut q = q0;
    for i in 1..=max_iters {
        let trace = batch_em(model, obs, q.clone(), model.r.clone(), 1, false)?;
        let next = trace.q[1].clone();
        let change = (next.matrix() - q.matrix()).norm() / next.matrix().norm();
        q = next;
        if change < tol {
            return Ok((q, i));
        }
    }
    Ok((q, max_iters))
}

/// Online OSS-EnKF with `N_p = 500` over `steps` cycles against the batch-EM
/// fixed point on the same observations: relative Frobenius error below 10%.
pub fn check_online_vs_batch(seed: u64, steps: usize) -> Result<OracleReport, HarnessError> {
    let model = bivariate_model();
    let (states, obs) = model.simulate(steps, &mut SeededRng::new(seed, 0))?;
    let q0 = SpdMatrix::scaled_identity(2, 1.0);
    let (q_batch, iters) = batch_em_fixed_point(&model, &obs, q0.clone(), 1e-6, 500)?;

    let spec = OnlineEmSpec {
        estimator: EstimatorKind::Oss,
        filter: FilterKind::Enkf,
        schedule: StepSchedule::default(),
        estimate_r: false,
    };
    let mut init_rng = SeededRng::new(seed, 2);
    let initial = sample_mvn(&states[0], &q0, &mut init_rng, 500)?;
    let mut em = OnlineEm::new(spec, initial, q0, model.r.clone())?;
    let dynamics = LinearMap { a: model.a.clone() };
    let h = IdentityObservation::new(2);
    let mut rng = SeededRng::new(seed, 1);
    for (i, y) in obs.iter().enumerate() {
        em.cycle(y, &dynamics, &h, &mut rng)
            .map_err(|e| HarnessError::Cycle { k: i + 1, source: e })?;
    }
    let rel = (em.q().matrix() - q_batch.matrix()).norm() / q_batch.matrix().norm();
    let fmt = |m: &DMatrix<f64>| format!("[{:.4} {:.4}; {:.4} {:.4}]", m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
    Ok(report(
        "online OSS-EnKF vs batch EM",
        rel < 0.1,
        format!(
            "online {} batch {} ({iters} iterations), relative error {rel:.4}",
            fmt(em.q().matrix()),
            fmt(q_batch.matrix())
        ),
    ))
}

/// Replicated ensemble runs on the scalar model.
struct ScalarRun {
    model: LinearGaussianModel<f64>,
    obs: Vec<DVector<f64>>,
    dynamics: LinearMap<f64>,
    h: IdentityObservation,
}

impl ScalarRun {
    fn new(seed: u64, steps: usize) -> Result<Self, HarnessError> {
        let model = scalar_model();
        let (_, obs) = model.simulate(steps, &mut SeededRng::new(seed, 0))?;
        let dynamics = LinearMap { a: model.a.clone() };
        Ok(Self {
            model,
            obs,
            dynamics,
            h: IdentityObservation::new(1),
        })
    }

    fn forecast(&self, analysis: &Ensemble<f64>, rng: &mut SeededRng) -> Result<Ensemble<f64>, HarnessError> {
        let noise = gaussian_noise(&self.model.q, analysis.n_p(), rng)?;
        Ok(Ensemble::new(&self.model.a * analysis.members() + noise)?)
    }

    /// EnKF through all observations; returns the last two analyses, the last
    /// forecast and the one-step smoothed ensemble at `K − 1`.
    fn enkf_enks(&self, n_p: usize, rng: &mut SeededRng) -> Result<(Ensemble<f64>, Ensemble<f64>), HarnessError> {
        let mut analysis = sample_mvn(&self.model.m0, &self.model.p0, rng, n_p)?;
        let mut last = None;
        for y in &self.obs {
            let forecast = self.forecast(&analysis, rng)?;
            let next = enkf_analysis(&forecast, y, &self.h, &self.model.r, rng)?;
            last = Some(FilterCycleState::new(analysis, forecast, next.clone(), y.clone())?);
            analysis = next;
        }
        let cycle = last.ok_or_else(|| HarnessError::Config("no observations".into()))?;
        let smoothed = enks_one_step(&cycle)?;
        Ok((cycle.analysis, smoothed))
    }
}

fn within(name: &str, values: &[f64], exact: f64) -> (bool, String) {
    let (mean, se) = mean_and_se(values);
    let z = (mean - exact) / se;
    (z.abs() < 3.0, format!("{name} {mean:.5} vs exact {exact:.5} (SE {se:.2e}, z {z:.2})"))
}

/// EnKF analysis and one-step EnKS means at `N_p = 10⁵` against the Kalman
/// filter and RTS smoother, within 3 replicate standard errors.
pub fn check_ensemble_means(seed: u64, replicates: usize) -> Result<OracleReport, HarnessError> {
    let run = ScalarRun::new(seed, 3)?;
    let filt = kalman_filter(&run.model, &run.obs)?;
    let smooth = rts_smoother(&run.model, &filt)?;
    let k = run.obs.len();
    let mut filtered = Vec::with_capacity(replicates);
    let mut smoothed = Vec::with_capacity(replicates);
    for rep in 0..replicates {
        let mut rng = SeededRng::new(seed, 10 + rep as u64);
        let (a, s) = run.enkf_enks(100_000, &mut rng)?;
        filtered.push(a.mean()[0]);
        smoothed.push(s.mean()[0]);
    }
    let (ok_f, d_f) = within("EnKF mean", &filtered, filt.steps[k - 1].filtered_mean[0]);
    let (ok_s, d_s) = within("EnKS mean", &smoothed, smooth.means[k - 1][0]);
    Ok(report("EnKF/EnKS vs Kalman/RTS", ok_f && ok_s, format!("{d_f}; {d_s}")))
}

/// IS (`N_p = 10⁴`, `M_p = 20`) and OSS (`N_p = 10⁵`) statistics against the
/// exact `E[(x_K − a x_{K−1})² | y_{1:K}]`, and against each other.
pub fn check_statistics(seed: u64, replicates: usize) -> Result<OracleReport, HarnessError> {
    let run = ScalarRun::new(seed, 3)?;
    let filt = kalman_filter(&run.model, &run.obs)?;
    let smooth = rts_smoother(&run.model, &filt)?;
    let k = run.obs.len();
    let exact = pair_statistic(&run.model, &smooth, &run.obs, k).0[(0, 0)];
    let prev = &filt.steps[k - 2];
    let prev_mean = prev.filtered_mean.clone();
    let prev_cov = SpdMatrix::new(prev.filtered_cov.clone())?;
    let y = &run.obs[k - 1];

    let mut is_values = Vec::with_capacity(replicates);
    let mut oss_values = Vec::with_capacity(replicates);
    for rep in 0..replicates {
        let mut rng = SeededRng::new(seed, 100 + rep as u64);
        let particles = sample_mvn(&prev_mean, &prev_cov, &mut rng, 10_000)?;
        let (s, _) = is_stats(&particles, &run.dynamics, &run.model.q, y, &run.h, &run.model.r, 20, false, &mut rng)?;
        is_values.push(s.s_q[(0, 0)]);

        let analysis_prev = sample_mvn(&prev_mean, &prev_cov, &mut rng, 100_000)?;
        let forecast = run.forecast(&analysis_prev, &mut rng)?;
        let analysis = enkf_analysis(&forecast, y, &run.h, &run.model.r, &mut rng)?;
        let cycle = FilterCycleState::new(analysis_prev, forecast, analysis.clone(), y.clone())?;
        let smoothed = enks_one_step(&cycle)?;
        let s = oss_stats(&smoothed, &analysis, y, &run.dynamics, &run.h, false)?;
        oss_values.push(s.s_q[(0, 0)]);
    }
    let (ok_is, d_is) = within("IS", &is_values, exact);
    let (ok_oss, d_oss) = within("OSS", &oss_values, exact);
    let (m_is, se_is) = mean_and_se(&is_values);
    let (m_oss, se_oss) = mean_and_se(&oss_values);
    let z = (m_is - m_oss) / (se_is * se_is + se_oss * se_oss).sqrt();
    Ok(report(
        "IS/OSS statistics vs exact",
        ok_is && ok_oss && z.abs() < 3.0,
        format!("{d_is}; {d_oss}; IS-OSS z {z:.2}"),
    ))
}

/// Seed of the battery.
pub const BATTERY_SEED: u64 = 20_240_601;

/// All four checks in order: batch-EM monotonicity, online versus batch EM,
/// ensemble means, and the sufficient statistics. A check that errors counts
/// as failed.
pub fn run_battery() -> Vec<OracleReport> {
    let checks: [(&str, Box<dyn Fn() -> Result<OracleReport, HarnessError>>); 4] = [
        ("batch EM monotone", Box::new(|| check_batch_em_monotone(BATTERY_SEED))),
        ("online OSS-EnKF vs batch EM", Box::new(|| check_online_vs_batch(BATTERY_SEED, 20_000))),
        ("EnKF/EnKS vs Kalman/RTS", Box::new(|| check_ensemble_means(BATTERY_SEED, 20))),
        ("IS/OSS statistics vs exact", Box::new(|| check_statistics(BATTERY_SEED, 20))),
    ];
    checks
        .iter()
        .map(|(name, f)| f().unwrap_or_else(|e| report(name, false, format!("error: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_error_of_constant_offsets() {
        let (m, se) = mean_and_se(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn monotone_check_passes() {
        assert!(check_batch_em_monotone(3).unwrap().passed);
    }

    #[test]
    fn fixed_point_is_stationary() {
        let model = bivariate_model();
        let (_, obs) = model.simulate(300, &mut SeededRng::new(4, 0)).unwrap();
        let (q, _) = batch_em_fixed_point(&model, &obs, SpdMatrix::scaled_identity(2, 1.0), 1e-10, 2000).unwrap();
        let again = batch_em(&model, &obs, q.clone(), model.r.clone(), 1, false).unwrap();
        assert!((again.q[1].matrix() - q.matrix()).norm() < 1e-8);
    }
}
