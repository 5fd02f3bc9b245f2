use gpmpc::belief::ResidualChannel;
use gpmpc::driver::{idm_accel, IdmParams, ACCEL_LIMIT};
use gpmpc::gp::{fit, fit_sparse, KernelParams, Posterior, TrainingSet};
use gpmpc::planner::{tightened_ellipse_offsets, CollisionEllipse};
use gpmpc::selftest::{dense_gp_posterior, random_z};
use gpmpc::sim::{prediction_error, Outcome, StepRecord, TrialGrid, TrialRecord};
use gpmpc::solver::SolveStatus;
use gpmpc::vehicle::{rk4_step_vec, AgentInput, AgentState, InputVec, StateVec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn training(seed: u64, n: usize) -> (Vec<nalgebra::DVector<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<_> = (0..n).map(|_| random_z(&mut rng)).collect();
    let y: Vec<f64> = z.iter().map(|z| (0.1 * z[7]).sin() - 0.01 * z[5]).collect();
    (z, y)
}

fn step(k: usize, v: f64, pred_v: Vec<f64>) -> StepRecord {
    StepRecord {
        k,
        time: 0.25 * k as f64,
        ego: AgentState::new(-90.0, -3.5, 31.0, 0.0, 0.0),
        follower: AgentState::new(-75.0, 0.0, v, 0.0, 0.0),
        leader: AgentState::new(0.0, 0.0, 25.0, 0.0, 0.0),
        input: AgentInput::new(0.0, 0.0),
        follower_accel: 0.0,
        residual: 0.0,
        data_size: k,
        solve_ms: 1.0,
        iterations: 1,
        status: SolveStatus::Converged,
        fallback: false,
        pred_x: vec![0.0; pred_v.len()],
        pred_sigma_x: vec![0.0; pred_v.len()],
        hc_follower: vec![0.0; pred_v.len()],
        hc_leader: vec![0.0; pred_v.len()],
        pred_v,
    }
}

fn record(velocities: &[f64], horizon: usize, offset: f64) -> TrialRecord {
    let n = velocities.len() - 1;
    let steps = (0..n)
        .map(|k| {
            let pred = (1..=horizon).map(|i| velocities.get(k + i).copied().unwrap_or(0.0) + offset).collect();
            step(k, velocities[k], pred)
        })
        .collect();
    TrialRecord {
        label: "gp".into(),
        trial: 0,
        ego_start_x: -90.0,
        steps,
        terminal: (
            AgentState::new(0.0, 0.0, 0.0, 0.0, 0.0),
            AgentState::new(0.0, 0.0, velocities[n], 0.0, 0.0),
            AgentState::new(0.0, 0.0, 0.0, 0.0, 0.0),
        ),
        outcome: Outcome::Failed,
        merge_step: None,
        collision: false,
        samples: Vec::new(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn tightening_never_enlarges_the_feasible_set(
        dx in -30.0..30.0f64, dy in -5.0..5.0f64,
        s1 in 0.0..50.0f64, ds in 0.0..50.0f64,
        a in 1.0..10.0f64, b in 0.5..4.0f64, sigma in 0.0..4.0f64,
    ) {
        let e = CollisionEllipse { semi_major: a, semi_minor: b, sigma };
        // feasible iff <= 0, so more variance may only raise the value
        prop_assert!(tightened_ellipse_offsets(dx, dy, s1 + ds, &e) >= tightened_ellipse_offsets(dx, dy, s1, &e));
    }

    #[test]
    fn exact_gp_variance_stays_between_zero_and_prior(seed in 0u64..1000, n in 1usize..10) {
        let params = KernelParams::merge_default();
        let (z, y) = training(seed, n);
        let model = fit(&params, &TrainingSet::from_pairs(z, y).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let p = model.posterior(&random_z(&mut rng)).unwrap();
        prop_assert!(p.variance >= 0.0 && p.variance <= params.prior_variance + 1e-12);
    }

    #[test]
    fn sparse_gp_with_training_inputs_as_inducing_points_is_exact(seed in 0u64..1000, n in 1usize..8) {
        let mut params = KernelParams::merge_default();
        params.noise_variance = 0.05;
        let (z, y) = training(seed, n);
        let sparse = fit_sparse(&params, &TrainingSet::from_pairs(z.clone(), y.clone()).unwrap(), &z).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let q = random_z(&mut rng);
        let p = sparse.posterior(&q).unwrap();
        let (m, v) = dense_gp_posterior(&params, &z, &y, params.noise_variance, &q).unwrap();
        prop_assert!((p.mean - m).abs() <= 1e-6, "mean {} vs {}", p.mean, m);
        prop_assert!((p.variance - v).abs() <= 1e-6, "variance {} vs {}", p.variance, v);
    }

    #[test]
    fn idm_output_is_clamped(v in 0.0..50.0f64, gap in -10.0..200.0f64, dv in -20.0..20.0f64) {
        let a = idm_accel(&IdmParams::default(), v, gap, dv);
        prop_assert!(a.abs() <= ACCEL_LIMIT);
    }

    #[test]
    fn idm_brakes_harder_for_smaller_gaps(v in 1.0..40.0f64, gap in 1.0..100.0f64, shrink in 0.0..0.9f64, dv in -5.0..5.0f64) {
        let p = IdmParams::default();
        prop_assert!(idm_accel(&p, v, gap * (1.0 - shrink), dv) <= idm_accel(&p, v, gap, dv));
    }

    #[test]
    fn residual_channel_recovers_scalar(y in -10.0..10.0f64, b in prop::array::uniform5(-2.0..2.0f64)) {
        let col = StateVec::from_column_slice(&b);
        prop_assume!(col.norm() > 1e-3);
        let ch = ResidualChannel::new(col).unwrap();
        prop_assert!((ch.project(&(col * y)) - y).abs() <= 1e-12 * (1.0 + y.abs()));
    }

    #[test]
    fn rk4_halving_shrinks_the_error(psi in -0.3..0.3f64, delta in -0.05..0.05f64, a in -3.0..3.0f64, r in -0.2..0.2f64) {
        let x0 = StateVec::new(0.0, 0.0, 25.0, psi, delta);
        let u = InputVec::new(a, r);
        let run = |n: usize| {
            let mut x = x0;
            for _ in 0..n { x = rk4_step_vec(&x, &u, 2.7, 1.0 / n as f64).unwrap(); }
            x
        };
        let reference = run(512);
        let coarse = (run(8) - reference).norm();
        let fine = (run(16) - reference).norm();
        prop_assert!(fine <= coarse / 8.0 + 1e-12);
    }

    #[test]
    fn grid_is_equidistant_and_spans_the_interval(start in -200.0..0.0f64, width in 0.1..100.0f64, count in 2usize..100) {
        let g = TrialGrid { start, end: start + width, count };
        let p = g.points();
        prop_assert_eq!(p.len(), count);
        prop_assert_eq!(p[0], start);
        prop_assert!((p[count - 1] - (start + width)).abs() <= 1e-12 * (1.0 + start.abs()));
        let h = width / (count - 1) as f64;
        for w in p.windows(2) {
            prop_assert!((w[1] - w[0] - h).abs() <= 1e-9);
        }
    }

    #[test]
    fn constant_prediction_offset_gives_that_error(
        v in prop::collection::vec(20.0..35.0f64, 4..30), eps in -2.0..2.0f64, k in 0usize..30,
    ) {
        let rec = record(&v, 12, eps);
        prop_assume!(k < rec.steps.len());
        let e = prediction_error(&rec, k).unwrap();
        prop_assert!((e - eps.abs()).abs() <= 1e-12);
    }
}

#[test]
fn perfect_prediction_has_zero_error() {
    let v: Vec<f64> = (0..20).map(|i| 25.0 + 0.1 * i as f64).collect();
    let rec = record(&v, 12, 0.0);
    for k in 0..rec.steps.len() {
        assert_eq!(prediction_error(&rec, k), Some(0.0));
    }
}

#[test]
fn error_window_is_truncated_at_the_trial_end() {
    let v = vec![30.0; 6];
    let mut rec = record(&v, 12, 0.0);
    // prediction made at step 3 can only be compared with t = 4 and t = 5
    rec.steps[3].pred_v = vec![31.0, 32.0, 99.0, 99.0];
    assert_eq!(prediction_error(&rec, 3), Some(1.5));
}
