mod common;

use common::{recompute_kkt, short_scenario};
use gpmpc::features;
use gpmpc::gp::{fit_sparse, TrainingSet};
use gpmpc::planner::{assemble_cv_mpc, assemble_gp_mpc, Scene};
use gpmpc::sim::{rectangles_overlap, run_batch, run_trial, ControllerSpec, Outcome, TrialRecord};
use gpmpc::solver::{solve, SolveStatus, ROUNDOFF_MERIT};
use gpmpc::vehicle::AgentInput;

fn scene_at(rec: &TrialRecord, k: usize) -> Scene {
    let s = &rec.steps[k];
    Scene {
        ego: s.ego,
        follower: s.follower,
        leader: s.leader,
        prev_input: if k == 0 { AgentInput::new(0.0, 0.0) } else { rec.steps[k - 1].input },
    }
}

#[test]
fn training_set_grows_by_one_and_residual_is_the_velocity_increment() {
    let cfg = short_scenario(40, 1);
    for spec in [ControllerSpec::GP, ControllerSpec::CV] {
        let rec = run_trial(&cfg, spec, 0, -90.0, None).unwrap();
        assert_eq!(rec.samples.len(), rec.steps.len());
        for (k, s) in rec.steps.iter().enumerate() {
            if spec == ControllerSpec::GP {
                assert_eq!(s.data_size, k);
            }
            let dv = rec.follower_velocity(k + 1).unwrap() - s.follower.v;
            assert!((s.residual - dv).abs() <= 1e-12, "step {k}");
            assert_eq!(rec.samples[k].1, s.residual);
        }
    }
}

#[test]
fn pretrained_controller_starts_from_the_fixture_size() {
    let cfg = short_scenario(10, 1);
    let data = gpmpc::sim::pretrain_set(&short_scenario(15, 1)).unwrap();
    assert_eq!(data.len(), 15);
    let rec = run_trial(&cfg, ControllerSpec::GP_PRETRAINED, 0, -90.0, Some(&data)).unwrap();
    for (k, s) in rec.steps.iter().enumerate() {
        assert_eq!(s.data_size, 15 + k);
    }
}

#[test]
fn samples_hold_the_joint_state_and_applied_input() {
    let cfg = short_scenario(12, 1);
    let rec = run_trial(&cfg, ControllerSpec::GP, 0, -95.0, None).unwrap();
    for (s, (z, _)) in rec.steps.iter().zip(&rec.samples) {
        let expect = features::assemble(
            &s.ego.to_vector(),
            &s.follower.to_vector(),
            &s.leader.to_vector(),
            &s.input.to_vector(),
        );
        assert_eq!(z, &expect);
    }
}

#[test]
fn replay_is_bitwise_deterministic() {
    let cfg = short_scenario(25, 3);
    let specs = [ControllerSpec::GP, ControllerSpec::CV];
    let a = run_batch(&cfg, &specs, None, 1).unwrap();
    let b = run_batch(&cfg, &specs, None, 2).unwrap();
    assert_eq!(a.records.len(), b.records.len());
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.steps.len(), y.steps.len());
        for (s, t) in x.steps.iter().zip(&y.steps) {
            assert_eq!(s.input, t.input);
            assert_eq!(s.follower, t.follower);
            assert_eq!(s.pred_v, t.pred_v);
        }
    }
    for (s, t) in a.summaries.iter().zip(&b.summaries) {
        assert_eq!(s.success, t.success);
        assert_eq!(s.mean_abs_err.to_bits(), t.mean_abs_err.to_bits());
    }
}

#[test]
fn one_trial_batch_without_data_applies_the_same_first_input() {
    let cfg = short_scenario(1, 1);
    let out = run_batch(&cfg, &[ControllerSpec::GP, ControllerSpec::CV], None, 1).unwrap();
    let gp = &out.records[0].steps[0];
    let cv = &out.records[1].steps[0];
    assert!((gp.input.accel - cv.input.accel).abs() <= 1e-6);
    assert!((gp.input.steer_rate - cv.input.steer_rate).abs() <= 1e-6);
    for i in 0..gp.pred_v.len() {
        assert!((gp.pred_v[i] - cv.pred_v[i]).abs() <= 1e-8);
        assert!((gp.pred_sigma_x[i] - cv.pred_sigma_x[i]).abs() <= 1e-8);
    }
}

#[test]
fn outcomes_are_consistent_with_the_trajectory() {
    let cfg = short_scenario(80, 3);
    let out = run_batch(&cfg, &[ControllerSpec::GP, ControllerSpec::CV], None, 1).unwrap();
    for rec in &out.records {
        if rec.outcome != Outcome::Failed {
            assert!(rec.merge_step.is_some() && !rec.collision);
            for s in &rec.steps {
                assert!(!rectangles_overlap(&s.ego, &s.follower, &cfg.planner.vehicle));
                assert!(!rectangles_overlap(&s.ego, &s.leader, &cfg.planner.vehicle));
            }
        }
        if rec.collision {
            assert_eq!(rec.outcome, Outcome::Failed);
        }
    }
}

#[test]
fn warm_and_cold_starts_reach_the_same_plan() {
    let cfg = short_scenario(20, 1);
    let rec = run_trial(&cfg, ControllerSpec::CV, 0, -85.0, None).unwrap();
    let mut compared = 0;
    for k in [5, 10, 15] {
        let scene = scene_at(&rec, k);
        let ocp = assemble_cv_mpc(&scene, &cfg.planner).unwrap();
        let cold = solve(&ocp.problem(None, false).unwrap(), &cfg.solver).unwrap();
        let prev = {
            let ocp0 = assemble_cv_mpc(&scene_at(&rec, k - 1), &cfg.planner).unwrap();
            solve(&ocp0.problem(None, false).unwrap(), &cfg.solver).unwrap().inputs
        };
        let warm_start = gpmpc::planner::shift_inputs(&prev);
        let warm = solve(&ocp.problem(Some(&warm_start), false).unwrap(), &cfg.solver).unwrap();
        if cold.status == SolveStatus::Converged && warm.status == SolveStatus::Converged {
            let scale = 1.0 + cold.objective.abs();
            assert!((cold.objective - warm.objective).abs() <= 1e-6 * scale);
            compared += 1;
        }
    }
    assert!(compared > 0);
}

#[test]
fn merit_never_increases_beyond_round_off_and_converged_solves_are_kkt_points() {
    let cfg = short_scenario(30, 1);
    let rec = run_trial(&cfg, ControllerSpec::GP, 0, -85.0, None).unwrap();
    let mut converged = 0;
    for k in (0..rec.steps.len()).step_by(3) {
        let scene = scene_at(&rec, k);
        let z0 = features::assemble(
            &scene.ego.to_vector(),
            &scene.follower.to_vector(),
            &scene.leader.to_vector(),
            &scene.prev_input.to_vector(),
        );
        let (zs, ys): (Vec<_>, Vec<_>) = rec.samples[..k].iter().cloned().unzip();
        let gp = fit_sparse(&cfg.kernel, &TrainingSet::from_pairs(zs, ys).unwrap(), &vec![z0; 4]).unwrap();
        let gp_ocp = assemble_gp_mpc(&scene, &gp, &cfg.planner).unwrap();
        let cv_ocp = assemble_cv_mpc(&scene, &cfg.planner).unwrap();
        for ocp in [&gp_ocp, &cv_ocp] {
            let problem = ocp.problem(None, false).unwrap();
            let r = solve(&problem, &cfg.solver).unwrap();
            for (before, after) in &r.merit_history {
                assert!(*after <= before + ROUNDOFF_MERIT * (1.0 + before.abs()), "step {k}: {before} -> {after}");
            }
            if r.status == SolveStatus::Converged {
                converged += 1;
                let (stat, primal, comp, neg) = recompute_kkt(&problem, &r);
                assert!(stat <= 1e-6 && primal <= 1e-6 && comp <= 1e-6, "step {k}: {stat:e} {primal:e} {comp:e}");
                assert!(neg >= -1e-9);
            }
        }
    }
    assert!(converged >= 10, "only {converged} converged solves");
}
