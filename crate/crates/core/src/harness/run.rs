use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::ser::{SerializeMap, Serializer};
use serde::Serialize;

use super::config::ExperimentConfig;
use super::twin::{filter_model, generate_truth_and_obs, is_neighbor, observation_operator, TwinData};
use super::HarnessError;
use crate::online_em::OnlineEm;
use crate::statespace::{sample_mvn, SeededRng, SpdMatrix};

/// Random stream of the truth and observations.
pub const TRUTH_STREAM: u64 = 0;
/// Random stream of the filter and the estimator.
pub const FILTER_STREAM: u64 = 1;
/// Random stream of the initial ensemble.
pub const INIT_STREAM: u64 = 2;

/// Mean diagonal, mean periodic-neighbour and mean remaining off-diagonal
/// entry of a covariance matrix. Empty categories are NaN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CovarianceSummary {
    pub diag_mean: f64,
    pub neighbor_mean: f64,
    pub far_mean: f64,
}

pub fn summarize_covariance(m: &DMatrix<f64>) -> CovarianceSummary {
    let n = m.nrows();
    let (mut d, mut nb, mut far) = (0.0, 0.0, 0.0);
    let (mut n_nb, mut n_far) = (0usize, 0usize);
    for i in 0..n {
        d += m[(i, i)];
        for j in 0..i {
            if is_neighbor(i, j, n) {
                nb += m[(i, j)];
                n_nb += 1;
            } else {
                far += m[(i, j)];
                n_far += 1;
            }
        }
    }
    let mean = |s: f64, c: usize| if c == 0 { f64::NAN } else { s / c as f64 };
    CovarianceSummary {
        diag_mean: d / n as f64,
        neighbor_mean: mean(nb, n_nb),
        far_mean: mean(far, n_far),
    }
}

/// Root of the time- and component-averaged squared error.
pub fn metrics_rmse(estimates: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<f64, HarnessError> {
    if estimates.len() != truth.len() || estimates.is_empty() {
        return Err(HarnessError::Config(format!(
            "rmse needs equal non-empty sequences, got {} and {}",
            estimates.len(),
            truth.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (e, t) in estimates.iter().zip(truth) {
        if e.len() != t.len() {
            return Err(HarnessError::Config("rmse vectors differ in length".into()));
        }
        sum += (e - t).norm_squared();
        count += e.len();
    }
    Ok((sum / count as f64).sqrt())
}

/// One line of the per-repetition output.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleRecord {
    pub k: usize,
    pub gamma: f64,
    pub q_summary: CovarianceSummary,
    pub rdiag_mean: f64,
    /// RMSE of the analysis mean against the truth at this cycle.
    pub rmse: f64,
    pub ess: Option<f64>,
    pub vmpf_iterations: Option<usize>,
    pub ms: f64,
    /// Full `Q̂`, kept every `matrix_stride` cycles and at the last cycle.
    pub q: Option<DMatrix<f64>>,
    pub r: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepetitionResult {
    pub rep: usize,
    pub seed: u64,
    pub records: Vec<CycleRecord>,
    pub final_q: DMatrix<f64>,
    pub final_r: DMatrix<f64>,
    /// Time-averaged analysis RMSE after the spin-up cycles.
    pub rmse: f64,
    pub skipped_updates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub repetitions: Vec<RepetitionResult>,
    /// Repetitions that failed, with the error message.
    pub failures: Vec<(usize, String)>,
}

/// Seed of repetition `rep`.
pub fn repetition_seed(config: &ExperimentConfig, rep: usize) -> u64 {
    config.seed.wrapping_add(rep as u64)
}

/// Twin data of repetition `rep`; identical for configs that differ only in
/// estimator settings.
pub fn repetition_data(config: &ExperimentConfig, rep: usize) -> Result<TwinData, HarnessError> {
    generate_truth_and_obs(config, &mut SeededRng::new(repetition_seed(config, rep), TRUTH_STREAM))
}

/// Runs one repetition on its own data.
pub fn run_repetition(config: &ExperimentConfig, rep: usize) -> Result<RepetitionResult, HarnessError> {
    let data = repetition_data(config, rep)?;
    run_repetition_with(config, rep, &data, |_, _| {})
}

/// Runs the estimator over `data`, calling `observe` after every cycle.
pub fn run_repetition_with<F>(
    config: &ExperimentConfig,
    rep: usize,
    data: &TwinData,
    mut observe: F,
) -> Result<RepetitionResult, HarnessError>
where
    F: FnMut(&CycleRecord, &OnlineEm<f64>),
{
    config.validate()?;
    let seed = repetition_seed(config, rep);
    let n = config.state_dim();
    let model = filter_model(config)?;
    let h = observation_operator(config);
    let q0 = SpdMatrix::scaled_identity(n, config.q0);
    let r0 = SpdMatrix::scaled_identity(n, config.r0());
    let mut init_rng = SeededRng::new(seed, INIT_STREAM);
    let initial = sample_mvn(&data.truth[0], &q0, &mut init_rng, config.n_particles)?;
    let mut em = OnlineEm::new(config.online_em_spec(), initial, q0, r0)?;
    let mut rng = SeededRng::new(seed, FILTER_STREAM);

    let mut records = Vec::with_capacity(data.obs.len());
    let mut sq_err = 0.0;
    let mut counted = 0usize;
    let mut skipped_updates = 0;
    let last = data.obs.len();
    for (i, y) in data.obs.iter().enumerate() {
        let start = Instant::now();
        let diag = em
            .cycle(y, &model, &h, &mut rng)
            .map_err(|e| HarnessError::Cycle { k: i + 1, source: e })?;
        let ms = if config.record_timing {
            start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        let k = diag.k;
        if diag.skipped.is_some() {
            skipped_updates += 1;
        }
        let err = (em.analysis().mean() - &data.truth[k]).norm_squared();
        if k > config.spin_up {
            sq_err += err;
            counted += n;
        }
        let keep = k % config.matrix_stride == 0 || k == last;
        let q = em.q().matrix();
        let record = CycleRecord {
            k,
            gamma: diag.gamma,
            q_summary: summarize_covariance(q),
            rdiag_mean: em.r().matrix().diagonal().mean(),
            rmse: (err / n as f64).sqrt(),
            ess: diag.ess,
            vmpf_iterations: diag.vmpf_iterations,
            ms,
            q: keep.then(|| q.clone()),
            r: (keep && config.estimate_r).then(|| em.r().matrix().clone()),
        };
        observe(&record, &em);
        records.push(record);
    }
    Ok(RepetitionResult {
        rep,
        seed,
        records,
        final_q: em.q().matrix().clone(),
        final_r: em.r().matrix().clone(),
        rmse: if counted == 0 { f64::NAN } else { (sq_err / counted as f64).sqrt() },
        skipped_updates,
    })
}

/// Worker count from `COVEST_THREADS`, if set.
pub fn thread_count() -> Option<usize> {
    std::env::var("COVEST_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Runs every repetition, in parallel across repetitions. A failed repetition
/// is logged and reported in `failures`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, HarnessError> {
    config.validate()?;
    let run = || {
        (0..config.repetitions)
            .into_par_iter()
            .map(|rep| (rep, run_repetition(config, rep)))
            .collect::<Vec<_>>()
    };
    let outcomes = match thread_count() {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    let mut result = ExperimentResult {
        repetitions: Vec::new(),
        failures: Vec::new(),
    };
    for (rep, outcome) in outcomes {
        match outcome {
            Ok(r) => result.repetitions.push(r),
            Err(e) => {
                log::warn!("repetition {rep} failed: {e}");
                result.failures.push((rep, e.to_string()));
            }
        }
    }
    Ok(result)
}

#[derive(Serialize)]
struct CsvRow {
    k: usize,
    gamma: f64,
    qdiag_mean: f64,
    qneigh_mean: f64,
    qfar_mean: f64,
    rdiag_mean: f64,
    rmse: f64,
    ess: f64,
    ms: f64,
}

#[derive(Serialize)]
struct MatrixEntry<'a> {
    q: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r: Option<Vec<Vec<f64>>>,
    #[serde(skip)]
    _k: std::marker::PhantomData<&'a ()>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Stored matrices keyed by cycle, in cycle order.
struct MatrixSidecar<'a>(&'a [CycleRecord]);

impl Serialize for MatrixSidecar<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let kept: Vec<_> = self.0.iter().filter(|r| r.q.is_some()).collect();
        let mut map = s.serialize_map(Some(kept.len()))?;
        for rec in kept {
            let entry = MatrixEntry {
                q: rows(rec.q.as_ref().expect("filtered")),
                r: rec.r.as_ref().map(rows),
                _k: std::marker::PhantomData,
            };
            map.serialize_entry(&rec.k.to_string(), &entry)?;
        }
        map.end()
    }
}

/// Writes `rep_<i>.csv` and `rep_<i>_matrices.json` for every repetition and
/// returns the paths written.
pub fn write_outputs(dir: &Path, result: &ExperimentResult) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
    let mut written = Vec::new();
    for rep in &result.repetitions {
        let csv_path = dir.join(format!("rep_{}.csv", rep.rep));
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| HarnessError::Io(e.to_string()))?;
        for r in &rep.records {
            w.serialize(CsvRow {
                k: r.k,
                gamma: r.gamma,
                qdiag_mean: r.q_summary.diag_mean,
                qneigh_mean: r.q_summary.neighbor_mean,
                qfar_mean: r.q_summary.far_mean,
                rdiag_mean: r.rdiag_mean,
                rmse: r.rmse,
                ess: r.ess.unwrap_or(f64::NAN),
                ms: r.ms,
            })
            .map_err(|e| HarnessError::Io(e.to_string()))?;
        }
        w.flush().map_err(|e| HarnessError::Io(e.to_string()))?;
        written.push(csv_path);

        let json_path = dir.join(format!("rep_{}_matrices.json", rep.rep));
        let text = serde_json::to_string(&MatrixSidecar(&rep.records)).map_err(|e| HarnessError::Io(e.to_string()))?;
        fs::write(&json_path, text).map_err(|e| HarnessError::Io(e.to_string()))?;
        written.push(json_path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::lorenz63_default;

    #[test]
    fn summary_categories() {
        let mut m = DMatrix::from_element(5, 5, 0.0);
        for i in 0..5 {
            m[(i, i)] = 1.0 + i as f64;
        }
        m[(0, 1)] = 0.5;
        m[(1, 0)] = 0.5;
        m[(0, 4)] = 0.3;
        m[(4, 0)] = 0.3;
        m[(0, 2)] = -0.2;
        m[(2, 0)] = -0.2;
        let s = summarize_covariance(&m);
        assert_eq!(s.diag_mean, 3.0);
        assert!((s.neighbor_mean - 0.8 / 5.0).abs() < 1e-15);
        assert!((s.far_mean + 0.2 / 5.0).abs() < 1e-15);
        // three variables: every pair is a neighbour
        assert!(summarize_covariance(&DMatrix::identity(3, 3)).far_mean.is_nan());
    }

    #[test]
    fn rmse_values() {
        let t: Vec<_> = (0..4).map(|i| DVector::from_element(3, i as f64)).collect();
        assert_eq!(metrics_rmse(&t, &t).unwrap(), 0.0);
        let shifted: Vec<_> = t.iter().map(|x| x.add_scalar(-0.7)).collect();
        assert!((metrics_rmse(&shifted, &t).unwrap() - 0.7).abs() < 1e-15);
        assert!(metrics_rmse(&t[..2], &t).is_err());
    }

    #[test]
    fn one_cycle_gives_one_record() {
        let mut c = lorenz63_default();
        c.n_cycles = 1;
        c.repetitions = 2;
        c.n_particles = 10;
        let res = run_experiment(&c).unwrap();
        assert_eq!(res.repetitions.len(), 2);
        assert!(res.failures.is_empty());
        for r in &res.repetitions {
            assert_eq!(r.records.len(), 1);
            assert!(r.records[0].q.is_some());
        }
    }

    #[test]
    fn outputs_are_reproducible() {
        let mut c = lorenz63_default();
        c.n_cycles = 60;
        c.n_particles = 10;
        c.record_timing = false;
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = write_outputs(dir_a.path(), &run_experiment(&c).unwrap()).unwrap();
        let b = write_outputs(dir_b.path(), &run_experiment(&c).unwrap()).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap());
        }
        let csv = fs::read_to_string(&a[0]).unwrap();
        assert!(csv.starts_with("k,gamma,qdiag_mean,qneigh_mean,qfar_mean,rdiag_mean,rmse,ess,ms\n"));
        assert_eq!(csv.lines().count(), 61);
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&a[1]).unwrap()).unwrap();
        let keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 2);
        assert!(keys.contains(&"50".to_string()) && keys.contains(&"60".to_string()));
    }

    #[test]
    fn records_match_stored_matrices() {
        let mut c = lorenz63_default();
        c.n_cycles = 40;
        c.n_particles = 10;
        c.matrix_stride = 1;
        let r = run_repetition(&c, 0).unwrap();
        for rec in &r.records {
            let q = rec.q.as_ref().unwrap();
            let s = summarize_covariance(q);
            let bits = |c: &CovarianceSummary| [c.diag_mean, c.neighbor_mean, c.far_mean].map(f64::to_bits);
            assert_eq!(bits(&s), bits(&rec.q_summary));
            assert_eq!(q, &q.transpose());
            assert!(SpdMatrix::new(q.clone()).unwrap().cholesky().is_ok());
        }
    }
}
