use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::config::{ExperimentConfig, ModelConfig, TrueQConfig};
use super::HarnessError;
use crate::models::{
    rk4_step_in_place, CycleMap, Dynamics, IntegratorSpec, Lorenz63, Lorenz96, Rk4Workspace, TwoScaleLorenz96,
};
use crate::statespace::{gaussian_noise, IdentityObservation, SpdMatrix};

/// Symmetric matrix with `diag` on the diagonal and `neighbor` between
/// periodic neighbours (`|i − j| = 1` or `n − 1`).
pub fn banded_matrix(n: usize, diag: f64, neighbor: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            diag
        } else if is_neighbor(i, j, n) {
            neighbor
        } else {
            0.0
        }
    })
}

pub(crate) fn is_neighbor(i: usize, j: usize, n: usize) -> bool {
    let d = i.abs_diff(j);
    d == 1 || d == n - 1
}

/// `1 + amplitude / (1 + exp(−(k − center) / width))`.
pub fn sigmoid_scale(k: usize, amplitude: f64, center: f64, width: f64) -> f64 {
    1.0 + amplitude / (1.0 + (-(k as f64 - center) / width).exp())
}

/// True model error covariance at cycle `k`, or `None` in the two-scale mode.
pub fn true_q_at(config: &ExperimentConfig, k: usize) -> Option<DMatrix<f64>> {
    let n = config.state_dim();
    match config.true_q {
        TrueQConfig::ScaledIdentity { variance } => Some(DMatrix::identity(n, n) * variance),
        TrueQConfig::Banded { diag, neighbor } => Some(banded_matrix(n, diag, neighbor)),
        TrueQConfig::Sigmoid {
            diag,
            neighbor,
            amplitude,
            center,
            width,
        } => Some(banded_matrix(n, diag, neighbor) * sigmoid_scale(k, amplitude, center, width)),
        TrueQConfig::TwoScale { .. } => None,
    }
}

/// One-cycle forecast map of the filter.
pub fn filter_model(config: &ExperimentConfig) -> Result<Box<dyn Dynamics<f64>>, HarnessError> {
    let integ = config.integrator()?;
    Ok(match config.model {
        ModelConfig::Lorenz63 { sigma, rho, beta } => Box::new(CycleMap::new(Lorenz63 { sigma, rho, beta }, integ)),
        ModelConfig::Lorenz96 { n, forcing } => Box::new(CycleMap::new(Lorenz96::new(n, forcing)?, integ)),
    })
}

/// Full-state observation operator of the filter model.
pub fn observation_operator(config: &ExperimentConfig) -> IdentityObservation {
    IdentityObservation::new(config.state_dim())
}

pub(crate) fn two_scale_system(config: &ExperimentConfig) -> Result<TwoScaleLorenz96<f64>, HarnessError> {
    match (config.model, config.true_q) {
        (ModelConfig::Lorenz96 { n, forcing }, TrueQConfig::TwoScale { n_small, h, b, c }) => {
            Ok(TwoScaleLorenz96::new(n, n_small, forcing, h, b, c)?)
        }
        _ => Err(HarnessError::Config("not a two-scale configuration".into())),
    }
}

/// Truth trajectory and observations of one twin experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinData {
    /// `x_0..x_K` in the filter's state space (large-scale part only in the
    /// two-scale mode).
    pub truth: Vec<DVector<f64>>,
    /// `y_1..y_K`.
    pub obs: Vec<DVector<f64>>,
}

/// RK4 stepping of the packed two-scale state `[X; Y]`.
pub(crate) struct TwoScaleStepper {
    pub system: TwoScaleLorenz96<f64>,
    pub dt: f64,
    ws: Rk4Workspace<f64>,
}

impl TwoScaleStepper {
    pub fn new(system: TwoScaleLorenz96<f64>, dt: f64) -> Self {
        let ws = Rk4Workspace::new(system.n() + system.n_small());
        Self { system, dt, ws }
    }

    pub fn step(&mut self, state: &mut DVector<f64>) -> Result<(), HarnessError> {
        rk4_step_in_place(&self.system, state, self.dt, &mut self.ws)?;
        Ok(())
    }

    /// Random initial state: `X = F + N(0, 1)`, `Y = 0.1 N(0, 1)`.
    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.system.n();
        let f = self.system.forcing;
        DVector::from_fn(n + self.system.n_small(), |i, _| {
            let z: f64 = crate::Scalar::standard_normal(rng);
            if i < n {
                f + z
            } else {
                0.1 * z
            }
        })
    }
}

fn true_q_covariance(config: &ExperimentConfig, k: usize) -> Result<SpdMatrix<f64>, HarnessError> {
    let m = true_q_at(config, k).ok_or_else(|| HarnessError::Config("no additive model error in two-scale mode".into()))?;
    let q = SpdMatrix::new(m).map_err(|e| HarnessError::Config(format!("true Q is not a covariance: {e}")))?;
    q.sampling_factor()
        .map_err(|e| HarnessError::Config(format!("true Q is not positive semidefinite: {e}")))?;
    Ok(q)
}

/// Two-scale truth observed on the large-scale variables. `on_step` sees the
/// packed state after every model step of the observed window.
pub(crate) fn two_scale_twin<R, F>(config: &ExperimentConfig, rng: &mut R, mut on_step: F) -> Result<TwinData, HarnessError>
where
    R: Rng + ?Sized,
    F: FnMut(&DVector<f64>),
{
    let n = config.state_dim();
    let r = SpdMatrix::scaled_identity(n, config.true_r);
    let integ: IntegratorSpec<f64> = config.integrator()?;
    let mut stepper = TwoScaleStepper::new(two_scale_system(config)?, integ.dt);
    let mut state = stepper.initial_state(rng);
    for _ in 0..config.truth_spin_up * integ.steps_per_cycle {
        stepper.step(&mut state)?;
    }
    let mut truth = Vec::with_capacity(config.n_cycles + 1);
    let mut obs = Vec::with_capacity(config.n_cycles);
    truth.push(state.rows(0, n).into_owned());
    for _ in 0..config.n_cycles {
        for _ in 0..integ.steps_per_cycle {
            stepper.step(&mut state)?;
            on_step(&state);
        }
        let x = state.rows(0, n).into_owned();
        obs.push(&x + gaussian_noise(&r, 1, rng)?.column(0));
        truth.push(x);
    }
    Ok(TwinData { truth, obs })
}

fn initial_truth<R: Rng + ?Sized>(config: &ExperimentConfig, rng: &mut R) -> DVector<f64> {
    let n = config.state_dim();
    let base = match config.model {
        ModelConfig::Lorenz63 { .. } => 1.0,
        ModelConfig::Lorenz96 { forcing, .. } => forcing,
    };
    DVector::from_fn(n, |_, _| base + <f64 as crate::Scalar>::standard_normal(rng))
}

/// Simulates the truth with the configured model error and observes the full
/// (large-scale) state with `R = σ_R² I`. The truth is first run noise-free
/// for `truth_spin_up` cycles from a random start.
pub fn generate_truth_and_obs<R: Rng + ?Sized>(config: &ExperimentConfig, rng: &mut R) -> Result<TwinData, HarnessError> {
    config.validate()?;
    let n = config.state_dim();
    let r = SpdMatrix::scaled_identity(n, config.true_r);
    let mut truth = Vec::with_capacity(config.n_cycles + 1);
    let mut obs = Vec::with_capacity(config.n_cycles);

    if config.is_two_scale() {
        return two_scale_twin(config, rng, |_| {});
    }

    let model = filter_model(config)?;
    let mut x = initial_truth(config, rng);
    for _ in 0..config.truth_spin_up {
        x = model.propagate(&x)?;
    }
    truth.push(x.clone());
    let varying = matches!(config.true_q, TrueQConfig::Sigmoid { .. });
    let mut q = true_q_covariance(config, 1)?;
    for k in 1..=config.n_cycles {
        if varying && k > 1 {
            q = true_q_covariance(config, k)?;
        }
        x = model.propagate(&x)? + gaussian_noise(&q, 1, rng)?.column(0);
        obs.push(&x + gaussian_noise(&r, 1, rng)?.column(0));
        truth.push(x.clone());
    }
    Ok(TwinData { truth, obs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{lorenz63_default, lorenz96_banded_default, two_scale_default};
    use crate::statespace::SeededRng;

    #[test]
    fn banded_structure() {
        let m = banded_matrix(5, 0.3, 0.09);
        assert_eq!(m[(0, 4)], 0.09);
        assert_eq!(m[(0, 2)], 0.0);
        assert_eq!(m, m.transpose());
    }

    #[test]
    fn sigmoid_closed_form() {
        let mut c = lorenz96_banded_default();
        c.true_q = TrueQConfig::Sigmoid {
            diag: 0.3,
            neighbor: 0.09,
            amplitude: 1.0,
            center: 1000.0,
            width: 200.0,
        };
        for k in [1usize, 500, 1000, 1600, 5000] {
            let q = true_q_at(&c, k).unwrap();
            let s = 1.0 + 1.0 / (1.0 + (-(k as f64 - 1000.0) / 200.0).exp());
            assert_eq!(q[(0, 0)], 0.3 * s);
            assert_eq!(q[(0, 1)], 0.09 * s);
            assert_eq!(q[(0, 3)], 0.0);
        }
        assert_eq!(sigmoid_scale(1000, 1.0, 1000.0, 200.0), 1.5);
    }

    #[test]
    fn noiseless_twin_observes_deterministic_trajectory() {
        let mut c = lorenz63_default();
        c.true_q = TrueQConfig::ScaledIdentity { variance: 0.0 };
        c.true_r = 0.0;
        c.r0 = Some(0.5);
        c.n_cycles = 30;
        let d = generate_truth_and_obs(&c, &mut SeededRng::new(1, 0)).unwrap();
        let model = filter_model(&c).unwrap();
        for k in 1..=30 {
            assert_eq!(d.truth[k], model.propagate(&d.truth[k - 1]).unwrap());
            assert_eq!(d.obs[k - 1], d.truth[k]);
        }
    }

    #[test]
    fn observation_residual_variance() {
        let mut c = lorenz63_default();
        c.n_cycles = 1000;
        let d = generate_truth_and_obs(&c, &mut SeededRng::new(2, 0)).unwrap();
        let n = 1000.0;
        let se = 0.5 * (2.0f64 / (n - 1.0)).sqrt();
        for i in 0..3 {
            let res: Vec<f64> = (0..1000).map(|k| d.obs[k][i] - d.truth[k + 1][i]).collect();
            let mean = res.iter().sum::<f64>() / n;
            let var = res.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!((var - 0.5).abs() < 3.0 * se, "component {i}: var {var}");
        }
    }

    #[test]
    fn same_seed_same_data() {
        let mut c = lorenz96_banded_default();
        c.n_cycles = 50;
        let a = generate_truth_and_obs(&c, &mut SeededRng::new(3, 0)).unwrap();
        let b = generate_truth_and_obs(&c, &mut SeededRng::new(3, 0)).unwrap();
        assert_eq!(a, b);
        let other = generate_truth_and_obs(&c, &mut SeededRng::new(4, 0)).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn two_scale_truth_observes_large_scale() {
        let mut c = two_scale_default();
        c.n_cycles = 5;
        c.truth_spin_up = 2;
        let d = generate_truth_and_obs(&c, &mut SeededRng::new(5, 0)).unwrap();
        assert_eq!(d.truth.len(), 6);
        assert!(d.truth.iter().all(|x| x.len() == 8));
        assert!(d.obs.iter().all(|y| y.len() == 8));
    }
}
