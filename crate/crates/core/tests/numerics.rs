use covest::models::{integrate, rk4_step, CycleMap, Dynamics, IntegratorSpec, Lorenz63, Lorenz96};
use covest::online_em::{EstimatorKind, FilterKind, OnlineEmSpec, StepSchedule};
use covest::statespace::{gaussian_noise, sample_mvn, IdentityObservation, SeededRng};
use covest::{OnlineEm32, OnlineEm64, SpdMatrix32, SpdMatrix64};
use covest::filters::VmpfSpec;
use nalgebra::DVector;

fn richardson_order<S: covest::models::OdeSystem<f64>>(sys: &S, x0: &DVector<f64>, horizon: f64) -> f64 {
    let solve = |steps: usize| integrate(sys, x0, horizon / steps as f64, steps).unwrap();
    let (a, b, c) = (solve(50), solve(100), solve(200));
    ((&a - &b).norm() / (&b - &c).norm()).log2()
}

#[test]
fn rk4_is_fourth_order_on_both_systems() {
    let l63 = richardson_order(&Lorenz63::standard(), &DVector::from_vec(vec![1.0, 1.0, 20.0]), 0.5);
    let mut x96 = DVector::from_element(8, 8.0);
    x96[3] += 0.5;
    let l96 = richardson_order(&Lorenz96::new(8, 8.0).unwrap(), &x96, 0.5);
    for order in [l63, l96] {
        assert!((3.8..=4.2).contains(&order), "order {order}");
    }
}

#[test]
fn integrate_matches_repeated_steps_bitwise() {
    let sys = Lorenz96::<f64>::new(6, 8.0).unwrap();
    let x0: DVector<f64> = DVector::from_vec(vec![8.1, 7.9, 8.0, 8.3, 7.7, 8.05]);
    let mut manual = x0.clone();
    for _ in 0..50 {
        manual = rk4_step(&sys, &manual, 0.001).unwrap();
    }
    let whole = integrate(&sys, &x0, 0.001, 50).unwrap();
    assert!(manual.iter().zip(whole.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

fn lorenz63_cycles<T: covest::Scalar>() -> (CycleMap<Lorenz63<T>, T>, Vec<DVector<T>>) {
    let model = CycleMap::new(Lorenz63::standard(), IntegratorSpec::new(T::lit(0.01), 5).unwrap());
    let mut rng = SeededRng::new(4, 0);
    let mut x = DVector::from_vec(vec![T::lit(1.0), T::lit(2.0), T::lit(20.0)]);
    let noise = covest::statespace::SpdMatrix::scaled_identity(3, T::lit(0.5));
    let mut obs = Vec::new();
    for _ in 0..40 {
        x = model.propagate(&x).unwrap();
        obs.push(&x + gaussian_noise(&noise, 1, &mut rng).unwrap().column(0));
    }
    (model, obs)
}

fn spec(estimator: EstimatorKind, filter: FilterKind) -> OnlineEmSpec {
    OnlineEmSpec {
        estimator,
        filter,
        schedule: StepSchedule::default(),
        estimate_r: true,
    }
}

#[test]
fn single_precision_pipeline_runs() {
    let (model, obs) = lorenz63_cycles::<f32>();
    let h = IdentityObservation::new(3);
    for (est, filter) in [
        (EstimatorKind::Oss, FilterKind::Enkf),
        (EstimatorKind::Is { m_p: 5 }, FilterKind::Vmpf { spec: VmpfSpec::default() }),
    ] {
        let mut rng = SeededRng::new(5, 1);
        let init = sample_mvn(&obs[0], &SpdMatrix32::scaled_identity(3, 1.0), &mut rng, 20).unwrap();
        let mut em = OnlineEm32::new(
            spec(est, filter),
            init,
            SpdMatrix32::scaled_identity(3, 1.0),
            SpdMatrix32::scaled_identity(3, 0.5),
        )
        .unwrap();
        for y in &obs[1..] {
            em.cycle(y, &model, &h, &mut rng).unwrap();
        }
        let q = em.q().matrix();
        assert!(q.iter().all(|v| v.is_finite()));
        assert_eq!(q, &q.transpose());
        assert!(em.r().matrix().diagonal().iter().all(|v| *v > 0.0));
    }
}

#[test]
fn single_and_double_precision_agree_on_the_first_cycle() {
    let (model32, obs32) = lorenz63_cycles::<f32>();
    let (model64, obs64) = lorenz63_cycles::<f64>();
    let h = IdentityObservation::new(3);
    let init64 = sample_mvn(&obs64[0], &SpdMatrix64::scaled_identity(3, 1.0), &mut SeededRng::new(6, 1), 30).unwrap();
    let init32 = covest::Ensemble32::new(init64.members().map(|v| v as f32)).unwrap();
    let mut em64 = OnlineEm64::new(
        spec(EstimatorKind::Oss, FilterKind::Enkf),
        init64,
        SpdMatrix64::scaled_identity(3, 1.0),
        SpdMatrix64::scaled_identity(3, 0.5),
    )
    .unwrap();
    let mut em32 = OnlineEm32::new(
        spec(EstimatorKind::Oss, FilterKind::Enkf),
        init32,
        SpdMatrix32::scaled_identity(3, 1.0),
        SpdMatrix32::scaled_identity(3, 0.5),
    )
    .unwrap();
    em64.cycle(&obs64[1], &model64, &h, &mut SeededRng::new(7, 1)).unwrap();
    em32.cycle(&obs32[1], &model32, &h, &mut SeededRng::new(7, 1)).unwrap();
    let scale = em64.q().matrix().amax();
    let diff = (em64.q().matrix() - em32.q().matrix().map(f64::from)).amax();
    assert!(diff < 1e-3 * scale.max(1.0), "diff {diff}");
}
