//! Fast invariant checks run by `gpmpc selftest`.
//!
//! The GP posterior is compared with dense LU solves, the empty-data GP
//! planner with the constant-velocity planner, and the integrator with a
//! refined reference trajectory.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::features;
use crate::gp::{fit, fit_sparse, posterior_eval, KernelParams, TrainingSet};
use crate::planner::{assemble_cv_mpc, assemble_gp_mpc, PlannerConfig, Scene};
use crate::solver::solve;
use crate::solver::SolverOptions;
use crate::vehicle::{rk4_step_vec, AgentInput, AgentState, InputVec, StateVec};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

/// Random joint state in a neighbourhood of the merge scene.
pub fn random_z(rng: &mut impl Rng) -> DVector<f64> {
    let ego = StateVec::new(
        rng.random_range(-100.0..60.0),
        rng.random_range(-3.5..0.0),
        rng.random_range(20.0..35.0),
        rng.random_range(-0.1..0.1),
        rng.random_range(-0.05..0.05),
    );
    let fol = StateVec::new(rng.random_range(-100.0..60.0), 0.0, rng.random_range(20.0..35.0), 0.0, 0.0);
    let lead = StateVec::new(rng.random_range(-20.0..100.0), 0.0, rng.random_range(20.0..30.0), 0.0, 0.0);
    let u = InputVec::new(rng.random_range(-5.0..5.0), rng.random_range(-0.08..0.08));
    features::assemble(&ego, &fol, &lead, &u)
}

/// Dense-algebra GP posterior: `(mean, variance)` at `query` with the given
/// diagonal added to the Gram matrix.
pub fn dense_gp_posterior(
    params: &KernelParams,
    inputs: &[DVector<f64>],
    outputs: &[f64],
    diagonal: f64,
    query: &DVector<f64>,
) -> Option<(f64, f64)> {
    let feat = |z: &DVector<f64>| &params.feature_map * z;
    let k = |a: &DVector<f64>, b: &DVector<f64>| {
        let (fa, fb) = (feat(a), feat(b));
        let mut q = 0.0;
        for r in 0..fa.len() {
            let d = (fa[r] - fb[r]) / params.length_scales[r];
            q += d * d;
        }
        params.prior_variance * (-0.5 * q).exp()
    };
    let n = inputs.len();
    if n == 0 {
        return Some((0.0, k(query, query)));
    }
    let gram = DMatrix::from_fn(n, n, |i, j| k(&inputs[i], &inputs[j]) + if i == j { diagonal } else { 0.0 });
    let ks = DVector::from_fn(n, |i, _| k(&inputs[i], query));
    let lu = gram.lu();
    let y = DVector::from_column_slice(outputs);
    let a = lu.solve(&y)?;
    let b = lu.solve(&ks)?;
    Some((ks.dot(&a), k(query, query) - ks.dot(&b)))
}

/// Exact-GP posterior against [`dense_gp_posterior`] on random training
/// sets of up to 12 points.
pub fn gp_oracle(seed: u64, sets: usize, tol: f64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = KernelParams::merge_default();
    let mut worst = 0.0f64;
    for _ in 0..sets {
        let n = rng.random_range(1..=12);
        let inputs: Vec<DVector<f64>> = (0..n).map(|_| random_z(&mut rng)).collect();
        let outputs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model = fit(&params, &TrainingSet::from_pairs(inputs.clone(), outputs.clone())?)?;
        let diag = params.noise_variance + model.jitter();
        for _ in 0..5 {
            let q = if rng.random_bool(0.3) { inputs[rng.random_range(0..n)].clone() } else { random_z(&mut rng) };
            let p = posterior_eval(&model, &q)?;
            let Some((m, v)) = dense_gp_posterior(&params, &inputs, &outputs, diag, &q) else {
                return Ok(CheckResult::new("gp oracle", false, "oracle system singular".into()));
            };
            worst = worst.max((p.mean - m).abs()).max((p.variance - v.max(0.0)).abs());
        }
    }
    Ok(CheckResult::new("gp oracle", worst <= tol, format!("max deviation {worst:.2e} (tol {tol:.0e})")))
}

/// Scene used by the planner checks.
pub fn reference_scene() -> Scene {
    Scene {
        ego: AgentState::new(-85.0, -3.5, 31.0, 0.0, 0.0),
        follower: AgentState::new(-75.0, 0.0, 31.0, 0.0, 0.0),
        leader: AgentState::new(0.0, 0.0, 25.0, 0.0, 0.0),
        prev_input: AgentInput::new(0.0, 0.0),
    }
}

fn random_inputs(rng: &mut impl Rng, horizon: usize) -> DVector<f64> {
    DVector::from_fn(2 * horizon, |i, _| {
        if i % 2 == 0 { rng.random_range(-5.0..5.0) } else { rng.random_range(-0.08..0.08) }
    })
}

/// With no training data, GP-MPC and CV-MPC predict the same Follower
/// moments and apply the same first input.
pub fn prior_equivalence(seed: u64) -> Result<CheckResult> {
    let config = PlannerConfig::default();
    let scene = reference_scene();
    let z0 = features::assemble(
        &scene.ego.to_vector(),
        &scene.follower.to_vector(),
        &scene.leader.to_vector(),
        &scene.prev_input.to_vector(),
    );
    let gp = fit_sparse(&KernelParams::merge_default(), &TrainingSet::new(), &vec![z0; 4])?;
    let gp_ocp = assemble_gp_mpc(&scene, &gp, &config)?;
    let cv_ocp = assemble_cv_mpc(&scene, &config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let u = random_inputs(&mut rng, config.horizon);
        let a = gp_ocp.predict(&u)?;
        let b = cv_ocp.predict(&u)?;
        for i in 0..a.follower_mean.len() {
            worst = worst
                .max((a.follower_mean[i] - b.follower_mean[i]).amax())
                .max((a.follower_cov[i] - b.follower_cov[i]).amax());
        }
    }
    let opts = SolverOptions::default();
    let ra = solve(&gp_ocp.problem(None, false)?, &opts)?;
    let rb = solve(&cv_ocp.problem(None, false)?, &opts)?;
    let du = (ra.inputs.rows(0, 2) - rb.inputs.rows(0, 2)).amax();
    Ok(CheckResult::new(
        "prior equivalence",
        worst <= 1e-8 && du <= 1e-6,
        format!("rollout deviation {worst:.2e}, first-input deviation {du:.2e}"),
    ))
}

/// Two input sequences that differ only in the ego's acceleration produce
/// different terminal Follower covariances under GP-MPC with one data point
/// and identical ones under CV-MPC.
pub fn dual_effect() -> Result<CheckResult> {
    let config = PlannerConfig::default();
    let scene = reference_scene();
    let z0 = features::assemble(
        &scene.ego.to_vector(),
        &scene.follower.to_vector(),
        &scene.leader.to_vector(),
        &scene.prev_input.to_vector(),
    );
    let data = TrainingSet::from_pairs(vec![z0.clone()], vec![-0.4])?;
    let gp = fit_sparse(&KernelParams::merge_default(), &data, &vec![z0; 4])?;
    let n = config.horizon;
    let u1 = DVector::zeros(2 * n);
    let u2 = DVector::from_fn(2 * n, |i, _| if i % 2 == 0 { 2.0 } else { 0.0 });
    let gp_ocp = assemble_gp_mpc(&scene, &gp, &config)?;
    let cv_ocp = assemble_cv_mpc(&scene, &config)?;
    let g1 = gp_ocp.predict(&u1)?.follower_cov[n];
    let g2 = gp_ocp.predict(&u2)?.follower_cov[n];
    let c1 = cv_ocp.predict(&u1)?.follower_cov[n];
    let c2 = cv_ocp.predict(&u2)?.follower_cov[n];
    let gap = (g1 - g2).amax();
    let identical = c1.iter().zip(c2.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    Ok(CheckResult::new(
        "dual effect",
        gap > 1e-12 && identical,
        format!("GP covariance gap {gap:.3e}, CV covariances identical: {identical}"),
    ))
}

/// Observed convergence order of the RK4 bicycle step on a curved path.
pub fn rk4_order() -> Result<(f64, Vec<f64>)> {
    let x0 = StateVec::new(0.0, 0.0, 20.0, 0.1, 0.05);
    let u = InputVec::new(1.5, 0.2);
    let horizon = 2.0;
    let wheelbase = 2.7;
    let run = |steps: usize| -> Result<StateVec> {
        let dt = horizon / steps as f64;
        let mut x = x0;
        for _ in 0..steps {
            x = rk4_step_vec(&x, &u, wheelbase, dt)?;
        }
        Ok(x)
    };
    let reference = run(8192)?;
    let mut errs = Vec::new();
    for steps in [10, 20, 40, 80] {
        errs.push((run(steps)? - reference).norm());
    }
    let orders: Vec<f64> = errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let min = orders.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((min, orders))
}

pub fn rk4_order_check() -> Result<CheckResult> {
    let (min, orders) = rk4_order()?;
    Ok(CheckResult::new("rk4 order", min >= 3.9, format!("orders {orders:.3?}")))
}

pub fn run_all() -> Vec<CheckResult> {
    let wrap = |name: &'static str, r: Result<CheckResult>| {
        r.unwrap_or_else(|e| CheckResult::new(name, false, format!("error: {e}")))
    };
    vec![
        wrap("gp oracle", gp_oracle(7, 50, 1e-10)),
        wrap("prior equivalence", prior_equivalence(11)),
        wrap("dual effect", dual_effect()),
        wrap("rk4 order", rk4_order_check()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Z_DIM;

    #[test]
    fn all_checks_pass() {
        for c in run_all() {
            println!("{}: {}", c.name, c.detail);
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn random_z_has_merge_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(random_z(&mut rng).len(), Z_DIM);
    }
}
