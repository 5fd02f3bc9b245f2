#![allow(dead_code)]

use gpmpc::sim::{ScenarioConfig, TrialGrid};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Default scenario cut to `steps` closed-loop steps and `count` trials.
pub fn short_scenario(steps: usize, count: usize) -> ScenarioConfig {
    ScenarioConfig {
        steps,
        grid: TrialGrid { start: -100.0, end: -75.0, count },
        ..ScenarioConfig::default()
    }
}

/// Random symmetric positive definite matrix with condition number below ~1e3.
pub fn random_spd(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let q = m.qr().q();
    let d = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| 10f64.powf(rng.random_range(-1.5..1.5))));
    let h = &q * d * q.transpose();
    (&h + h.transpose()) * 0.5
}

/// Equality-constrained QP on the rows in `active`, solved as one dense
/// KKT system `[H A'; A 0] [x; l] = [-g; b]`.
pub fn kkt_solve(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    active: &[usize],
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = g.len();
    let m = active.len();
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-g));
    for (r, &i) in active.iter().enumerate() {
        for j in 0..n {
            k[(n + r, j)] = a[(i, j)];
            k[(j, n + r)] = a[(i, j)];
        }
        rhs[n + r] = b[i];
    }
    let sol = k.full_piv_lu().solve(&rhs)?;
    Some((sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned()))
}

/// KKT residuals of a finished solve, recomputed from the model's own
/// derivatives and the returned multipliers. Returns
/// `(stationarity, primal, complementarity, most negative multiplier)`.
pub fn recompute_kkt(
    problem: &gpmpc::solver::OcpProblem,
    result: &gpmpc::solver::SolveResult,
) -> (f64, f64, f64, f64) {
    let model = problem.model();
    let u = &result.inputs;
    let s = &result.slacks;
    let (nu, ns, nh) = (model.num_inputs(), model.num_soft(), model.num_hard());
    let e = model.evaluate(u, true).unwrap();
    let rows = 2 * ns + nh + 2 * nu;
    let n = nu + ns;
    let mut c = DVector::zeros(rows);
    let mut jac = DMatrix::zeros(rows, n);
    for j in 0..ns {
        c[j] = e.soft[j] - s[j];
        c[ns + j] = -s[j];
        for i in 0..nu {
            jac[(j, i)] = e.soft_jacobian[(j, i)];
        }
        jac[(j, nu + j)] = -1.0;
        jac[(ns + j, nu + j)] = -1.0;
    }
    for j in 0..nh {
        c[2 * ns + j] = e.hard[j];
        for i in 0..nu {
            jac[(2 * ns + j, i)] = e.hard_jacobian[(j, i)];
        }
    }
    let off = 2 * ns + nh;
    for i in 0..nu {
        c[off + i] = u[i] - problem.upper()[i];
        c[off + nu + i] = problem.lower()[i] - u[i];
        jac[(off + i, i)] = 1.0;
        jac[(off + nu + i, i)] = -1.0;
    }
    let mut grad = DVector::from_element(n, problem.penalty());
    grad.rows_mut(0, nu).copy_from(&e.gradient);
    let l = &result.multipliers;
    let stat = (&grad + jac.transpose() * l).amax();
    let primal = c.iter().fold(0.0f64, |m, v| m.max(*v));
    let comp = c
        .iter()
        .zip(l.iter())
        .filter(|(c, _)| c.is_finite())
        .fold(0.0f64, |m, (c, l)| m.max((c * l).abs()));
    (stat, primal, comp, l.min().min(0.0))
}
