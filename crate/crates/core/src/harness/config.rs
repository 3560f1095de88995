use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::filters::VmpfSpec;
use crate::models::IntegratorSpec;
use crate::online_em::{EstimatorKind, FilterKind, OnlineEmSpec, StepSchedule};

/// Dynamical system used by the filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Lorenz63 {
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default = "default_beta")]
        beta: f64,
    },
    Lorenz96 {
        n: usize,
        #[serde(default = "default_forcing")]
        forcing: f64,
    },
}

fn default_sigma() -> f64 {
    10.0
}
fn default_rho() -> f64 {
    28.0
}
fn default_beta() -> f64 {
    8.0 / 3.0
}
fn default_forcing() -> f64 {
    8.0
}

impl ModelConfig {
    pub fn state_dim(&self) -> usize {
        match self {
            ModelConfig::Lorenz63 { .. } => 3,
            ModelConfig::Lorenz96 { n, .. } => *n,
        }
    }
}

/// How the truth is perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrueQConfig {
    /// `σ² I`.
    ScaledIdentity { variance: f64 },
    /// `diag` on the diagonal, `neighbor` between periodic neighbours.
    Banded { diag: f64, neighbor: f64 },
    /// A banded matrix whose entries are scaled by
    /// `1 + amplitude / (1 + exp(−(k − center) / width))` at cycle `k`.
    Sigmoid {
        diag: f64,
        #[serde(default)]
        neighbor: f64,
        #[serde(default = "default_amplitude")]
        amplitude: f64,
        #[serde(default = "default_center")]
        center: f64,
        #[serde(default = "default_width")]
        width: f64,
    },
    /// No additive noise: the truth runs two-scale Lorenz-96 and only the
    /// large-scale variables are observed. The filter model must be the
    /// one-scale Lorenz-96 with the same `n` and forcing.
    TwoScale {
        #[serde(default = "default_n_small")]
        n_small: usize,
        #[serde(default = "default_h")]
        h: f64,
        #[serde(default = "default_bc")]
        b: f64,
        #[serde(default = "default_bc")]
        c: f64,
    },
}

fn default_amplitude() -> f64 {
    1.0
}
fn default_center() -> f64 {
    1000.0
}
fn default_width() -> f64 {
    200.0
}
fn default_n_small() -> usize {
    256
}
fn default_h() -> f64 {
    1.0
}
fn default_bc() -> f64 {
    10.0
}

/// Everything needed to run a twin experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// Time between observations, Δt.
    #[serde(default = "default_cycle_length")]
    pub cycle_length: f64,
    /// Integration step δt; Δt must be an integer multiple of it.
    pub dt: f64,
    pub n_cycles: usize,
    pub true_q: TrueQConfig,
    /// True observation error variance, `R = σ_R² I`. Zero gives noise-free
    /// observations, in which case `r0` must be set.
    pub true_r: f64,
    #[serde(default)]
    pub estimate_r: bool,
    pub filter: FilterKind,
    pub estimator: EstimatorKind,
    pub n_particles: usize,
    #[serde(default)]
    pub schedule: StepSchedule,
    /// First guess `Q₀ = q0 · I`.
    pub q0: f64,
    /// First guess `R₀ = r0 · I`; defaults to the true `R`.
    #[serde(default)]
    pub r0: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    /// Noise-free cycles run before cycle 0 to put the truth on the attractor.
    #[serde(default = "default_truth_spin_up")]
    pub truth_spin_up: usize,
    /// Cycles left out of RMSE summaries.
    #[serde(default = "default_spin_up")]
    pub spin_up: usize,
    /// Full matrices are stored every `matrix_stride` cycles.
    #[serde(default = "default_matrix_stride")]
    pub matrix_stride: usize,
    /// Write per-cycle wall-clock milliseconds; when false the column is 0 and
    /// output files are reproducible byte for byte.
    #[serde(default = "default_true")]
    pub record_timing: bool,
}

fn default_cycle_length() -> f64 {
    0.05
}
fn default_repetitions() -> usize {
    1
}
fn default_truth_spin_up() -> usize {
    200
}
fn default_spin_up() -> usize {
    20
}
fn default_matrix_stride() -> usize {
    50
}
fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// Reads a `.json` or `.toml` file.
    pub fn from_path(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        let cfg = match ext.as_str() {
            "json" => Self::from_json(&text)?,
            "toml" => Self::from_toml(&text)?,
            other => {
                return Err(HarnessError::Config(format!(
                    "unsupported config extension '{other}', expected .json or .toml"
                )))
            }
        };
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn integrator(&self) -> Result<IntegratorSpec<f64>, HarnessError> {
        Ok(IntegratorSpec::from_cycle(self.cycle_length, self.dt)?)
    }

    pub fn online_em_spec(&self) -> OnlineEmSpec {
        OnlineEmSpec {
            estimator: self.estimator,
            filter: self.filter,
            schedule: self.schedule,
            estimate_r: self.estimate_r,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    pub fn r0(&self) -> f64 {
        self.r0.unwrap_or(self.true_r)
    }

    pub fn is_two_scale(&self) -> bool {
        matches!(self.true_q, TrueQConfig::TwoScale { .. })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.integrator()?;
        self.online_em_spec().validate()?;
        if let ModelConfig::Lorenz96 { n, .. } = self.model {
            if n < 4 {
                return bad(format!("Lorenz-96 needs at least 4 variables, got {n}"));
            }
        }
        if self.n_cycles == 0 {
            return bad("n_cycles must be at least 1".into());
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        if self.n_particles < 2 {
            return bad("n_particles must be at least 2".into());
        }
        if self.matrix_stride == 0 {
            return bad("matrix_stride must be at least 1".into());
        }
        if !(self.true_r >= 0.0) || !(self.q0 > 0.0) || !(self.r0() > 0.0) {
            return bad("true_r must be non-negative, q0 and r0 positive".into());
        }
        match self.true_q {
            TrueQConfig::ScaledIdentity { variance } if !(variance >= 0.0) => {
                return bad("true_q variance must be non-negative".into())
            }
            TrueQConfig::Banded { diag, neighbor } | TrueQConfig::Sigmoid { diag, neighbor, .. }
                if !(diag >= 0.0) || !neighbor.is_finite() =>
            {
                return bad("true_q diag must be non-negative and neighbor finite".into())
            }
            TrueQConfig::Sigmoid { width, amplitude, .. } if !(width > 0.0) || !amplitude.is_finite() => {
                return bad("sigmoid width must be positive".into())
            }
            TrueQConfig::TwoScale { n_small, .. } => match self.model {
                ModelConfig::Lorenz96 { n, .. } if n_small % n == 0 && n_small > 0 => {}
                _ => {
                    return bad(
                        "two-scale truth needs a Lorenz-96 filter model whose n divides n_small".into(),
                    )
                }
            },
            _ => {}
        }
        Ok(())
    }
}

/// The configuration of the three-variable experiment: `σ_Q² = 0.3`,
/// `σ_R² = 0.5`, 50 particles, 20 transition draws.
pub fn lorenz63_default() -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig::Lorenz63 {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        },
        cycle_length: 0.05,
        dt: 0.01,
        n_cycles: 2000,
        true_q: TrueQConfig::ScaledIdentity { variance: 0.3 },
        true_r: 0.5,
        estimate_r: false,
        filter: FilterKind::Enkf,
        estimator: EstimatorKind::Is { m_p: 20 },
        n_particles: 50,
        schedule: StepSchedule::default(),
        q0: 1.0,
        r0: None,
        seed: 0,
        repetitions: 1,
        truth_spin_up: default_truth_spin_up(),
        spin_up: default_spin_up(),
        matrix_stride: default_matrix_stride(),
        record_timing: true,
    }
}

/// Eight-variable Lorenz-96 with banded `Q` (0.3 diagonal, 0.09 neighbours).
pub fn lorenz96_banded_default() -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig::Lorenz96 { n: 8, forcing: 8.0 },
        dt: 0.001,
        true_q: TrueQConfig::Banded {
            diag: 0.3,
            neighbor: 0.09,
        },
        estimator: EstimatorKind::Oss,
        ..lorenz63_default()
    }
}

/// Imperfect-model setup: two-scale truth, one-scale filter with F = 20.
pub fn two_scale_default() -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig::Lorenz96 { n: 8, forcing: 20.0 },
        dt: 0.001,
        true_q: TrueQConfig::TwoScale {
            n_small: 256,
            h: 1.0,
            b: 10.0,
            c: 10.0,
        },
        estimator: EstimatorKind::Oss,
        q0: 0.5,
        ..lorenz63_default()
    }
}

/// `VmpfSpec` defaults, re-exported for configs built in code.
pub fn vmpf_filter() -> FilterKind {
    FilterKind::Vmpf {
        spec: VmpfSpec::default(),
    }
}
