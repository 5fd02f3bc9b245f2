//! Acceptance suite: one line per criterion, nonzero exit if any fails.

mod common;

use std::path::Path;
use std::time::Instant;

use common::{kkt_solve, random_spd, recompute_kkt};
use gpmpc::belief::{Companion, GaussianBelief, LinearGaussianResidual, LinearNominal, Propagator, ResidualChannel};
use gpmpc::config;
use gpmpc::features::{self, TARGET, Z_DIM};
use gpmpc::gp::{fit_sparse, TrainingSet};
use gpmpc::planner::{assemble_cv_mpc, assemble_gp_mpc, tightened_ellipse_offsets, CollisionEllipse, Scene};
use gpmpc::selftest;
use gpmpc::sim::{self, ControllerSpec, ScenarioConfig, TrialGrid, TrialRecord};
use gpmpc::solver::{solve, solve_qp, QpStatus, SolveStatus};
use gpmpc::vehicle::{AgentInput, InputVec, StateMatrix, StateVec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(bool, String), String>;

fn report(n: usize, title: &str, check: Check) -> bool {
    let (ok, detail) = check.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!("criterion {n:>2}: {} {title}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn gp_oracle() -> Check {
    let t = Instant::now();
    let r = selftest::gp_oracle(101, 60, 1e-10).map_err(s)?;
    let dt = t.elapsed().as_secs_f64();
    Ok((r.passed && dt < 1.0, format!("{} over 60 training sets, {dt:.3} s", r.detail)))
}

fn prior_equivalence() -> Check {
    let r = selftest::prior_equivalence(102).map_err(s)?;
    let cfg = ScenarioConfig { steps: 1, grid: TrialGrid { start: -85.0, end: -85.0, count: 1 }, ..Default::default() };
    let out = sim::run_batch(&cfg, &[ControllerSpec::GP, ControllerSpec::CV], None, 1).map_err(s)?;
    let (a, b) = (&out.records[0].steps[0].input, &out.records[1].steps[0].input);
    let du = (a.accel - b.accel).abs().max((a.steer_rate - b.steer_rate).abs());
    Ok((r.passed && du <= 1e-6, format!("{}, closed-loop first-input deviation {du:.2e}", r.detail)))
}

fn dual_effect() -> Check {
    let r = selftest::dual_effect().map_err(s)?;
    Ok((r.passed, r.detail))
}

fn propagation_exactness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let a = StateMatrix::identity() + StateMatrix::from_fn(|_, _| rng.random_range(-0.15..0.15));
        let b = StateVec::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let w = DVector::from_fn(Z_DIM, |_, _| rng.random_range(-0.1..0.1));
        let res = LinearGaussianResidual { weights: w.clone(), offset: 0.2, variance: 0.05 };
        let l = StateMatrix::from_fn(|i, j| if i >= j { rng.random_range(-0.5..0.5) } else { 0.0 });
        let (m0, s0) = (StateVec::from_fn(|_, _| rng.random_range(-3.0..3.0)), l * l.transpose());
        let nominal = LinearNominal(a);
        let prop = Propagator::new(&nominal, ResidualChannel::new(b).map_err(s)?);
        let wt = StateVec::from_iterator(w.rows(TARGET.start, 5).iter().copied());
        let closed = a + b * wt.transpose();
        let (mut m, mut cov) = (m0, s0);
        let mut belief = GaussianBelief::new(m0, s0);
        for _ in 0..12 {
            let c = Companion {
                ego: StateVec::from_fn(|_, _| rng.random_range(-5.0..5.0)),
                leader: StateVec::from_fn(|_, _| rng.random_range(-5.0..5.0)),
                ego_input: InputVec::new(rng.random_range(-1.0..1.0), 0.0),
            };
            belief = prop.step(&res, &belief, &c).map_err(s)?;
            let affine = w.dot(&c.feature(&StateVec::zeros())) + 0.2;
            m = closed * m + b * affine;
            cov = closed * cov * closed.transpose() + b * b.transpose() * 0.05;
            let scale = 1.0 + cov.amax().max(m.amax());
            worst = worst.max((belief.mean() - m).amax() / scale).max((belief.covariance() - cov).amax() / scale);
        }
    }
    Ok((worst <= 1e-10, format!("max scaled deviation {worst:.2e} over 10 systems, N = 12")))
}

fn rk4_order() -> Check {
    let t = Instant::now();
    let (min, orders) = selftest::rk4_order().map_err(s)?;
    let dt = t.elapsed().as_secs_f64();
    Ok((min >= 3.9 && dt < 5.0, format!("orders {orders:.3?}, {dt:.3} s")))
}

type Samples = Vec<(DVector<f64>, f64)>;

fn merge_scenes(rec: &TrialRecord) -> Vec<(Scene, Samples)> {
    (0..rec.steps.len())
        .step_by(4)
        .map(|k| {
            let st = &rec.steps[k];
            let prev = if k == 0 { AgentInput::new(0.0, 0.0) } else { rec.steps[k - 1].input };
            (Scene { ego: st.ego, follower: st.follower, leader: st.leader, prev_input: prev }, rec.samples[..k].to_vec())
        })
        .collect()
}

fn solver_soundness(cfg: &ScenarioConfig) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut qp_worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(2..=48);
        let m = rng.random_range(1..=2 * n);
        let h = random_spd(&mut rng, n);
        let g = DVector::from_fn(n, |_, _| rng.random_range(-10.0..10.0));
        let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let x0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let ax = &a * &x0;
        let b = DVector::from_fn(m, |i, _| ax[i] + if rng.random_bool(0.35) { 0.0 } else { rng.random_range(0.0..2.0) });
        let sol = solve_qp(&h, &g, &a, &b).map_err(s)?;
        if sol.status != QpStatus::Optimal {
            return Ok((false, "feasible QP reported infeasible".into()));
        }
        let r = &a * &sol.x - &b;
        let active: Vec<usize> = (0..m).filter(|&i| r[i] >= -1e-9).collect();
        let (x, l) = kkt_solve(&h, &g, &a, &b, &active).ok_or("singular oracle KKT system")?;
        let certified = l.iter().all(|v| *v >= -1e-9) && (&a * &x - &b).iter().all(|v| *v <= 1e-9);
        if !certified {
            return Ok((false, "oracle could not certify the active set".into()));
        }
        qp_worst = qp_worst.max((&sol.x - &x).amax());
    }

    let mut kkt_worst = 0.0f64;
    let (mut converged, mut total) = (0, 0);
    for spec in [ControllerSpec::GP, ControllerSpec::CV] {
        let rec = sim::run_trial(cfg, spec, 0, -85.0, None).map_err(s)?;
        for (scene, data) in merge_scenes(&rec) {
            let z0 = features::assemble(
                &scene.ego.to_vector(),
                &scene.follower.to_vector(),
                &scene.leader.to_vector(),
                &scene.prev_input.to_vector(),
            );
            let (zs, ys): (Vec<_>, Vec<_>) = data.into_iter().unzip();
            let gp = fit_sparse(&cfg.kernel, &TrainingSet::from_pairs(zs, ys).map_err(s)?, &vec![z0; cfg.inducing_points])
                .map_err(s)?;
            let ocp = match spec.controller {
                sim::Controller::Gp => assemble_gp_mpc(&scene, &gp, &cfg.planner),
                sim::Controller::Cv => assemble_cv_mpc(&scene, &cfg.planner),
            }
            .map_err(s)?;
            let problem = ocp.problem(None, false).map_err(s)?;
            let r = solve(&problem, &cfg.solver).map_err(s)?;
            total += 1;
            if r.status == SolveStatus::Converged {
                converged += 1;
                let (stat, primal, comp, neg) = recompute_kkt(&problem, &r);
                kkt_worst = kkt_worst.max(stat).max(primal).max(comp).max(-neg);
            }
        }
    }
    Ok((
        qp_worst <= 1e-8 && kkt_worst <= 1e-6 && converged > 0,
        format!(
            "20 QPs max deviation {qp_worst:.2e}; merge OCP {converged}/{total} converged, max recomputed KKT residual {kkt_worst:.2e}"
        ),
    ))
}

struct Replication {
    batch: sim::BatchResult,
    pretrain_len: usize,
    seconds: f64,
}

fn replication(cfg: &ScenarioConfig, fixture: &Path) -> Result<Replication, String> {
    let data = sim::read_training_csv(fixture).map_err(s)?;
    let mut c = cfg.clone();
    c.grid = TrialGrid { start: -100.0, end: -75.0, count: 11 };
    let t = Instant::now();
    let batch = sim::run_batch(
        &c,
        &[ControllerSpec::GP, ControllerSpec::CV, ControllerSpec::GP_PRETRAINED],
        Some(&data),
        std::thread::available_parallelism().map_or(1, |n| n.get()),
    )
    .map_err(s)?;
    Ok(Replication { batch, pretrain_len: data.len(), seconds: t.elapsed().as_secs_f64() })
}

fn table_direction(rep: &Replication) -> Check {
    let get = |l: &str| rep.batch.summaries.iter().find(|b| b.controller == l).ok_or(format!("no {l} summary"));
    let (gp, cv, pre) = (get("gp")?, get("cv")?, get("gp-pretrained")?);
    let a = gp.success >= cv.success && !(gp.success == 0 && cv.success == 0);
    let b = gp.mean_abs_err_pre_merge <= cv.mean_abs_err_pre_merge;
    let c = pre.mean_abs_err_pre_merge <= gp.mean_abs_err_pre_merge;
    let t = rep.seconds < 600.0;
    Ok((
        a && b && c && t,
        format!(
            "(a) success gp {}/11 vs cv {}/11 [{}]; (b) pre-merge |e| gp {:.4} vs cv {:.4} [{}]; \
             (c) pre-trained {:.4} vs online {:.4} [{}]; {:.1} s",
            gp.success,
            cv.success,
            if a { "ok" } else { "fail" },
            gp.mean_abs_err_pre_merge,
            cv.mean_abs_err_pre_merge,
            if b { "ok" } else { "fail" },
            pre.mean_abs_err_pre_merge,
            gp.mean_abs_err_pre_merge,
            if c { "ok" } else { "fail" },
            rep.seconds
        ),
    ))
}

fn tightening() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let mut violations = 0;
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let e = CollisionEllipse {
            semi_major: rng.random_range(1.0..10.0),
            semi_minor: rng.random_range(0.5..4.0),
            sigma: rng.random_range(0.0..4.0),
        };
        let (dx, dy) = (rng.random_range(-40.0..40.0), rng.random_range(-6.0..6.0));
        let s1: f64 = rng.random_range(0.0..30.0);
        let s2 = s1 + rng.random_range(0.0..30.0);
        let (h1, h2) = (tightened_ellipse_offsets(dx, dy, s1, &e), tightened_ellipse_offsets(dx, dy, s2, &e));
        if h2 < h1 {
            violations += 1;
        }
        let closed = |sx: f64| {
            let a = e.semi_major + e.sigma * (sx + 1e-9).sqrt();
            1.0 - (dx / a).powi(2) - (dy / e.semi_minor).powi(2)
        };
        worst = worst.max((h1 - closed(s1)).abs() / (1.0 + h1.abs())).max((h2 - closed(s2)).abs() / (1.0 + h2.abs()));
    }
    Ok((
        violations == 0 && worst <= 1e-12,
        format!(
            "10000 samples: feasible set {{h_c <= 0}} never grows with Sigma_X ({violations} violations of h_c(S2) >= h_c(S1)); \
             max deviation from the closed form {worst:.1e}"
        ),
    ))
}

fn bookkeeping(rep: &Replication) -> Check {
    let mut worst = 0.0f64;
    let mut bad_size = 0;
    let mut steps = 0;
    for rec in &rep.batch.records {
        let d0 = match rec.label.as_str() {
            "gp" => Some(0),
            "gp-pretrained" => Some(rep.pretrain_len),
            _ => None,
        };
        for (k, st) in rec.steps.iter().enumerate() {
            steps += 1;
            if d0.is_some_and(|d| st.data_size != d + k) {
                bad_size += 1;
            }
            let next_v = if k + 1 < rec.steps.len() { rec.steps[k + 1].follower.v } else { rec.terminal.1.v };
            worst = worst.max((st.residual - (next_v - st.follower.v)).abs());
        }
    }
    Ok((
        bad_size == 0 && worst <= 1e-12,
        format!("{steps} logged steps over {} trials: {bad_size} size mismatches, max |y_k - dv_k| {worst:.1e}", rep.batch.records.len()),
    ))
}

fn realtime(rep: &Replication) -> Check {
    let parts: Vec<String> = rep
        .batch
        .summaries
        .iter()
        .map(|b| format!("{} {:.2} ms ({:.1}% < Ts)", b.controller, b.mean_solve_ms, b.pct_realtime))
        .collect();
    let ok = rep.batch.summaries.iter().all(|b| b.mean_solve_ms.is_finite() && b.mean_solve_ms > 0.0);
    Ok((ok, format!("mean solve time {}", parts.join(", "))))
}

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let loaded = config::load(Some(&root.join("configs/default.json"))).expect("default config loads");
    let cfg = loaded.scenario;

    let mut ok = true;
    ok &= report(1, "GP oracle equivalence", gp_oracle());
    ok &= report(2, "prior equivalence", prior_equivalence());
    ok &= report(3, "dual control effect", dual_effect());
    ok &= report(4, "propagation exactness", propagation_exactness());
    ok &= report(5, "RK4 order", rk4_order());
    ok &= report(6, "solver soundness", solver_soundness(&cfg));
    let rep = replication(&cfg, &loaded.pretrain_fixture);
    match &rep {
        Ok(r) => ok &= report(7, "table direction on 11 trials", table_direction(r)),
        Err(e) => ok &= report(7, "table direction on 11 trials", Err(e.clone())),
    }
    ok &= report(8, "tightening monotonicity", tightening());
    match &rep {
        Ok(r) => {
            ok &= report(9, "online-learning bookkeeping", bookkeeping(r));
            ok &= report(10, "real-time indicator", realtime(r));
        }
        Err(e) => {
            ok &= report(9, "online-learning bookkeeping", Err(e.clone()));
            ok &= report(10, "real-time indicator", Err(e.clone()));
        }
    }
    println!("acceptance: {}", if ok { "all criteria pass" } else { "FAILED" });
    if !ok {
        std::process::exit(1);
    }
}
