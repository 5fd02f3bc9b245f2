//! Small dense nonlinear programming toolkit.
//!
//! [`solve_qp`] is a Goldfarb-Idnani dual active-set method for strictly
//! convex QPs. [`solve`] runs an SQP loop on an [`OcpProblem`] built from an
//! [`OcpModel`]: inputs are the only primal variables of the model, softened
//! constraints get one non-negative slack each with an l1 penalty, the
//! Lagrangian Hessian is a damped BFGS approximation seeded with the
//! Gauss-Newton matrix of the objective, and steps are globalized with an l1
//! merit line search.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// QP

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub status: QpStatus,
    pub x: DVector<f64>,
    /// One multiplier per row of `A`, zero for inactive rows.
    pub multipliers: DVector<f64>,
    pub active_set: Vec<usize>,
    pub iterations: usize,
}

/// Solves `min 1/2 x'Hx + g'x  s.t.  A x <= b` for symmetric positive
/// definite `H`. `guess` is an optional starting active set.
pub fn solve_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<QpSolution> {
    solve_qp_warm(h, g, a, b, &[])
}

pub fn solve_qp_warm(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    guess: &[usize],
) -> Result<QpSolution> {
    let n = g.len();
    if h.nrows() != n || h.ncols() != n || a.ncols() != n || a.nrows() != b.len() {
        return Err(Error::invalid("QP dimensions are inconsistent"));
    }
    let sym = (h + h.transpose()) * 0.5;
    let chol = sym
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical("qp", "Hessian is not positive definite"))?;
    let hinv = chol.inverse();
    let mut sol = solve_qp_with_inverse(&hinv, g, a, b, guess)?;
    if sol.status == QpStatus::Optimal && !sol.active_set.is_empty() {
        polish(&sym, g, a, b, &mut sol);
    }
    Ok(sol)
}

/// Re-solves the KKT system of the final working set without the explicit
/// inverse, keeping the result only if it is at least as feasible.
fn polish(h: &DMatrix<f64>, g: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>, sol: &mut QpSolution) {
    let n = g.len();
    let w = &sol.active_set;
    let q = w.len();
    let mut k = DMatrix::zeros(n + q, n + q);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    let mut rhs = DVector::zeros(n + q);
    rhs.rows_mut(0, n).copy_from(&(-g));
    for (j, &i) in w.iter().enumerate() {
        let row = a.row(i);
        k.view_mut((n + j, 0), (1, n)).copy_from(&row);
        k.view_mut((0, n + j), (n, 1)).copy_from(&row.transpose());
        rhs[n + j] = b[i];
    }
    let lu = k.clone().lu();
    let Some(mut z) = lu.solve(&rhs) else { return };
    if let Some(corr) = lu.solve(&(&rhs - &k * &z)) {
        z += corr;
    }
    if z.iter().any(|v| !v.is_finite()) {
        return;
    }
    let x = z.rows(0, n).into_owned();
    let lam = z.rows(n, q);
    let lmax = lam.amax().max(1.0);
    if lam.iter().any(|&l| l < -1e-9 * lmax) {
        return;
    }
    let worst = |x: &DVector<f64>| {
        (a * x - b)
            .iter()
            .zip(b.iter())
            .fold(0.0f64, |m, (r, bi)| m.max(r / (1.0 + bi.abs())))
    };
    if worst(&x) > worst(&sol.x).max(1e-12) {
        return;
    }
    sol.x = x;
    sol.multipliers.fill(0.0);
    for (j, &i) in w.iter().enumerate() {
        sol.multipliers[i] = lam[j].max(0.0);
    }
}

/// Point, active set, multipliers and the `-H^-1 a_j` columns of a face.
type Face = (DVector<f64>, Vec<usize>, Vec<f64>, Vec<DVector<f64>>);

/// Minimizer over the face `{a_j x = b_j, j in guess}`, dropping constraints
/// with negative multipliers until the remaining ones are dual feasible.
fn initial_face(
    hinv: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    guess: &[usize],
) -> Option<Face> {
    let hg = hinv * g;
    let mut active: Vec<usize> = Vec::new();
    for &i in guess {
        if i < b.len() && !active.contains(&i) && a.row(i).amax() > 0.0 {
            active.push(i);
        }
    }
    let mut hn: Vec<DVector<f64>> = active.iter().map(|&i| -(hinv * a.row(i).transpose())).collect();
    loop {
        let q = active.len();
        if q == 0 {
            return Some((-hg, active, Vec::new(), hn));
        }
        let mut mm = DMatrix::zeros(q, q);
        let mut rhs = DVector::zeros(q);
        for j in 0..q {
            let nj = -a.row(active[j]).transpose();
            rhs[j] = -b[active[j]] + nj.dot(&hg);
            for k in 0..=j {
                let v = nj.dot(&hn[k]);
                mm[(j, k)] = v;
                mm[(k, j)] = v;
            }
        }
        let u = mm.cholesky()?.solve(&rhs);
        let (k, umin) = u.argmin();
        if umin < 0.0 {
            active.remove(k);
            hn.remove(k);
            continue;
        }
        let mut x = -hg;
        for j in 0..q {
            x.axpy(u[j], &hn[j], 1.0);
        }
        return Some((x, active, u.iter().copied().collect(), hn));
    }
}

fn solve_qp_with_inverse(
    hinv: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    guess: &[usize],
) -> Result<QpSolution> {
    let n = g.len();
    let m = b.len();
    let (mut x, mut active, mut u, mut hn) = initial_face(hinv, g, a, b, guess)
        .or_else(|| initial_face(hinv, g, a, b, &[]))
        .expect("empty face always exists");
    let row_norms: Vec<f64> = (0..m).map(|i| a.row(i).norm()).collect();
    let max_iter = 50 * (n + m) + 100;
    let mut iterations = 0;

    let slack = |x: &DVector<f64>, i: usize| b[i] - a.row(i).dot(&x.transpose());

    loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(Error::numerical("qp", "iteration limit reached (cycling)"));
        }
        // most violated constraint, normalized by the row norm
        let xnorm = x.amax();
        let mut p = None;
        let mut worst = 0.0;
        for i in 0..m {
            if active.contains(&i) || row_norms[i] == 0.0 {
                continue;
            }
            let s = slack(&x, i) / row_norms[i];
            let tol = 1e-13 * (1.0 + b[i].abs() / row_norms[i] + xnorm);
            if s < -tol && s < worst {
                worst = s;
                p = Some(i);
            }
        }
        let Some(p) = p else {
            let mut multipliers = DVector::zeros(m);
            for (j, &i) in active.iter().enumerate() {
                multipliers[i] = u[j];
            }
            return Ok(QpSolution {
                status: QpStatus::Optimal,
                x,
                multipliers,
                active_set: active,
                iterations,
            });
        };

        let np = -a.row(p).transpose();
        let hnp = hinv * &np;
        let np_hnp = np.dot(&hnp);
        u.push(0.0);

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(Error::numerical("qp", "iteration limit reached (cycling)"));
            }
            let q = active.len();
            let (z, r) = if q == 0 {
                (hnp.clone(), DVector::zeros(0))
            } else {
                let mut mm = DMatrix::zeros(q, q);
                let mut rhs = DVector::zeros(q);
                for j in 0..q {
                    let nj = -a.row(active[j]).transpose();
                    rhs[j] = nj.dot(&hnp);
                    for k in 0..=j {
                        let v = nj.dot(&hn[k]);
                        mm[(j, k)] = v;
                        mm[(k, j)] = v;
                    }
                }
                let r = match mm.clone().cholesky() {
                    Some(c) => c.solve(&rhs),
                    None => mm
                        .lu()
                        .solve(&rhs)
                        .ok_or_else(|| Error::numerical("qp", "active set became dependent"))?,
                };
                let mut z = hnp.clone();
                for j in 0..q {
                    z.axpy(-r[j], &hn[j], 1.0);
                }
                (z, r)
            };

            // partial step length (dual)
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for j in 0..q {
                if r[j] > 0.0 {
                    let t = u[j] / r[j];
                    if t < t1 {
                        t1 = t;
                        drop = Some(j);
                    }
                }
            }
            // full step length (primal)
            let znp = z.dot(&np);
            let t2 = if znp > 1e-12 * np_hnp {
                -slack(&x, p) / znp
            } else {
                f64::INFINITY
            };

            if t1.is_infinite() && t2.is_infinite() {
                let mut multipliers = DVector::zeros(m);
                for (j, &i) in active.iter().enumerate() {
                    multipliers[i] = u[j];
                }
                return Ok(QpSolution {
                    status: QpStatus::Infeasible,
                    x,
                    multipliers,
                    active_set: active,
                    iterations,
                });
            }

            if t2.is_infinite() {
                for j in 0..q {
                    u[j] -= t1 * r[j];
                }
                u[q] += t1;
                let k = drop.expect("finite partial step");
                active.remove(k);
                hn.remove(k);
                u.remove(k);
                continue;
            }

            let t = t1.min(t2);
            x.axpy(t, &z, 1.0);
            for j in 0..q {
                u[j] -= t * r[j];
            }
            u[q] += t;
            if t2 <= t1 {
                active.push(p);
                hn.push(hnp);
                break;
            }
            let k = drop.expect("finite partial step");
            active.remove(k);
            hn.remove(k);
            u.remove(k);
        }
    }
}

// ---------------------------------------------------------------------------
// NLP

/// Values (and optionally first derivatives) of a single-shooting optimal
/// control problem at an input sequence.
#[derive(Debug, Clone)]
pub struct OcpEval {
    pub objective: f64,
    pub gradient: DVector<f64>,
    /// Softened constraints, feasible when `<= 0`.
    pub soft: DVector<f64>,
    pub soft_jacobian: DMatrix<f64>,
    /// Hard constraints, feasible when `<= 0`.
    pub hard: DVector<f64>,
    pub hard_jacobian: DMatrix<f64>,
    /// Gauss-Newton approximation of the objective Hessian, when available.
    pub gauss_newton: Option<DMatrix<f64>>,
}

pub trait OcpModel: Send + Sync {
    fn num_inputs(&self) -> usize;
    fn num_soft(&self) -> usize;
    fn num_hard(&self) -> usize;
    /// Evaluates the problem; derivative fields may be left empty when
    /// `derivatives` is false.
    fn evaluate(&self, inputs: &DVector<f64>, derivatives: bool) -> Result<OcpEval>;
}

/// An [`OcpModel`] with bounds, penalty and starting point.
pub struct OcpProblem<'a> {
    model: &'a dyn OcpModel,
    lower: DVector<f64>,
    upper: DVector<f64>,
    penalty: f64,
    initial: DVector<f64>,
}

impl<'a> OcpProblem<'a> {
    pub fn num_inputs(&self) -> usize {
        self.model.num_inputs()
    }

    pub fn num_slacks(&self) -> usize {
        self.model.num_soft()
    }

    /// Inputs followed by slacks.
    pub fn num_variables(&self) -> usize {
        self.num_inputs() + self.num_slacks()
    }

    pub fn initial_inputs(&self) -> &DVector<f64> {
        &self.initial
    }

    pub fn penalty(&self) -> f64 {
        self.penalty
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn model(&self) -> &dyn OcpModel {
        self.model
    }
}

/// Assembles a problem. With `check_derivatives`, the model's first
/// derivatives are compared against central differences at the starting
/// point and a mismatch is reported with the name of the block.
pub fn build_ocp<'a>(
    model: &'a dyn OcpModel,
    lower: DVector<f64>,
    upper: DVector<f64>,
    penalty: f64,
    warm_start: Option<&DVector<f64>>,
    check_derivatives: bool,
) -> Result<OcpProblem<'a>> {
    let n = model.num_inputs();
    if lower.len() != n || upper.len() != n {
        return Err(Error::invalid("bound vectors must match the number of inputs"));
    }
    for i in 0..n {
        if lower[i] > upper[i] || lower[i].is_nan() || upper[i].is_nan() {
            return Err(Error::invalid(format!(
                "infeasible bounds for input {i}: [{}, {}]",
                lower[i], upper[i]
            )));
        }
    }
    if !(penalty > 0.0 && penalty.is_finite()) {
        return Err(Error::invalid("penalty weight must be positive"));
    }
    let mut initial = match warm_start {
        Some(w) if w.len() == n => w.clone(),
        Some(_) => return Err(Error::invalid("warm start has the wrong length")),
        None => DVector::zeros(n),
    };
    for i in 0..n {
        initial[i] = initial[i].clamp(lower[i], upper[i]);
    }
    if check_derivatives && n > 0 {
        derivative_check(model, &initial)?;
    }
    Ok(OcpProblem {
        model,
        lower,
        upper,
        penalty,
        initial,
    })
}

fn derivative_check(model: &dyn OcpModel, u: &DVector<f64>) -> Result<()> {
    let base = model.evaluate(u, true)?;
    let n = u.len();
    let mut fd_grad = DVector::zeros(n);
    let mut fd_soft = DMatrix::zeros(base.soft.len(), n);
    let mut fd_hard = DMatrix::zeros(base.hard.len(), n);
    for i in 0..n {
        let h = 1e-6 * u[i].abs().max(1.0);
        let mut up = u.clone();
        up[i] += h;
        let mut dn = u.clone();
        dn[i] -= h;
        let ep = model.evaluate(&up, false)?;
        let em = model.evaluate(&dn, false)?;
        fd_grad[i] = (ep.objective - em.objective) / (2.0 * h);
        fd_soft.set_column(i, &((ep.soft - em.soft) / (2.0 * h)));
        fd_hard.set_column(i, &((ep.hard - em.hard) / (2.0 * h)));
    }
    let check = |name: &str, an: &[f64], fd: &[f64]| -> Result<()> {
        let scale = an.iter().chain(fd).fold(1.0f64, |m, v| m.max(v.abs()));
        let (k, err) = an
            .iter()
            .zip(fd)
            .map(|(a, f)| (a - f).abs())
            .enumerate()
            .fold((0, 0.0), |best, (k, e)| if e > best.1 { (k, e) } else { best });
        if err > 1e-4 * scale || err.is_nan() {
            return Err(Error::DerivativeCheck {
                block: name.to_string(),
                detail: format!("entry {k}: analytic {} vs finite difference {}", an[k], fd[k]),
            });
        }
        Ok(())
    };
    check("objective gradient", base.gradient.as_slice(), fd_grad.as_slice())?;
    check("soft constraint jacobian", base.soft_jacobian.as_slice(), fd_soft.as_slice())?;
    check("hard constraint jacobian", base.hard_jacobian.as_slice(), fd_hard.as_slice())?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    NumericalFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub inputs: DVector<f64>,
    pub slacks: DVector<f64>,
    pub objective: f64,
    pub kkt: KktResiduals,
    /// Multipliers of the last QP, rows ordered soft - s, -s, hard, upper
    /// bounds, lower bounds (one row per input each).
    pub multipliers: DVector<f64>,
    /// Largest multiplier of a softened constraint; equal to the penalty
    /// when the l1 reformulation saturates.
    pub max_soft_multiplier: f64,
    pub iterations: usize,
    pub solve_time_s: f64,
    /// Merit before and after every accepted step, both at the penalty
    /// parameter used by that line search.
    pub merit_history: Vec<(f64, f64)>,
    pub message: String,
}

/// Constraint values and Jacobian of the slack-augmented NLP, all `<= 0`.
/// Row order: soft - s, -s, hard, upper bounds, lower bounds.
struct Linearization {
    eval: OcpEval,
    objective: f64,
    gradient: DVector<f64>,
    cons: DVector<f64>,
    jac: DMatrix<f64>,
}

struct Nlp<'p, 'a> {
    p: &'p OcpProblem<'a>,
    nu: usize,
    ns: usize,
    nh: usize,
}

impl Nlp<'_, '_> {
    fn num_cons(&self) -> usize {
        2 * self.ns + self.nh + 2 * self.nu
    }

    fn split(&self, w: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (w.rows(0, self.nu).into_owned(), w.rows(self.nu, self.ns).into_owned())
    }

    fn values(&self, w: &DVector<f64>) -> Result<(f64, DVector<f64>, OcpEval)> {
        let (u, s) = self.split(w);
        let eval = self.p.model.evaluate(&u, false)?;
        self.check_dims(&eval, false)?;
        let obj = eval.objective + self.p.penalty * s.sum();
        let cons = self.constraint_values(&eval, &u, &s);
        if !obj.is_finite() || cons.iter().any(|c| !c.is_finite()) {
            return Err(Error::numerical("ocp", "non-finite objective or constraint"));
        }
        Ok((obj, cons, eval))
    }

    fn check_dims(&self, e: &OcpEval, derivatives: bool) -> Result<()> {
        let ok = e.soft.len() == self.ns
            && e.hard.len() == self.nh
            && (!derivatives
                || (e.gradient.len() == self.nu
                    && e.soft_jacobian.shape() == (self.ns, self.nu)
                    && e.hard_jacobian.shape() == (self.nh, self.nu)));
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("model evaluation has inconsistent dimensions"))
        }
    }

    fn constraint_values(&self, e: &OcpEval, u: &DVector<f64>, s: &DVector<f64>) -> DVector<f64> {
        let (nu, ns, nh) = (self.nu, self.ns, self.nh);
        let mut c = DVector::zeros(self.num_cons());
        for j in 0..ns {
            c[j] = e.soft[j] - s[j];
            c[ns + j] = -s[j];
        }
        for j in 0..nh {
            c[2 * ns + j] = e.hard[j];
        }
        let off = 2 * ns + nh;
        for i in 0..nu {
            c[off + i] = u[i] - self.p.upper[i];
            c[off + nu + i] = self.p.lower[i] - u[i];
        }
        // infinite bounds never bind
        c.iter_mut().for_each(|v| {
            if *v == f64::NEG_INFINITY {
                *v = -1e300;
            }
        });
        c
    }

    fn linearize(&self, w: &DVector<f64>) -> Result<Linearization> {
        let (u, s) = self.split(w);
        let eval = self.p.model.evaluate(&u, true)?;
        self.check_dims(&eval, true)?;
        let (nu, ns, nh) = (self.nu, self.ns, self.nh);
        let n = nu + ns;
        let mut gradient = DVector::zeros(n);
        gradient.rows_mut(0, nu).copy_from(&eval.gradient);
        gradient.rows_mut(nu, ns).fill(self.p.penalty);
        let cons = self.constraint_values(&eval, &u, &s);
        let mut jac = DMatrix::zeros(self.num_cons(), n);
        jac.view_mut((0, 0), (ns, nu)).copy_from(&eval.soft_jacobian);
        for j in 0..ns {
            jac[(j, nu + j)] = -1.0;
            jac[(ns + j, nu + j)] = -1.0;
        }
        jac.view_mut((2 * ns, 0), (nh, nu)).copy_from(&eval.hard_jacobian);
        let off = 2 * ns + nh;
        for i in 0..nu {
            jac[(off + i, i)] = 1.0;
            jac[(off + nu + i, i)] = -1.0;
        }
        let objective = eval.objective + self.p.penalty * s.sum();
        if !objective.is_finite()
            || gradient.iter().any(|v| !v.is_finite())
            || jac.iter().any(|v| !v.is_finite())
        {
            return Err(Error::numerical("ocp", "non-finite derivatives"));
        }
        Ok(Linearization {
            eval,
            objective,
            gradient,
            cons,
            jac,
        })
    }
}

fn violation(c: &DVector<f64>) -> f64 {
    c.iter().map(|v| v.max(0.0)).sum()
}

fn initial_hessian(nu: usize, ns: usize, gn: Option<&DMatrix<f64>>) -> DMatrix<f64> {
    let n = nu + ns;
    let mut b = DMatrix::identity(n, n);
    if let Some(gn) = gn {
        let scale = (0..nu).map(|i| gn[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
        let mut blk = (gn + gn.transpose()) * 0.5;
        let mut reg = 1e-10 * scale;
        while blk.clone().cholesky().is_none() {
            for i in 0..nu {
                blk[(i, i)] += reg;
            }
            reg *= 10.0;
        }
        b.view_mut((0, 0), (nu, nu)).copy_from(&blk);
    }
    b
}

fn kkt_residuals(lin: &Linearization, lambda: &DVector<f64>) -> KktResiduals {
    let stat = &lin.gradient + lin.jac.transpose() * lambda;
    let primal = lin.cons.iter().fold(0.0f64, |m, c| m.max(*c));
    let comp = lin
        .cons
        .iter()
        .zip(lambda.iter())
        .fold(0.0f64, |m, (c, l)| m.max((c * l).abs()));
    KktResiduals {
        stationarity: stat.amax(),
        primal,
        complementarity: comp,
    }
}

/// Solves an elastic version of the QP in which the hard rows may be violated
/// at a cost; used when the linearized constraints are inconsistent.
fn elastic_qp(
    nlp: &Nlp,
    hess: &DMatrix<f64>,
    lin: &Linearization,
    weight: f64,
) -> Result<QpSolution> {
    let n = nlp.nu + nlp.ns;
    let nh = nlp.nh;
    let m = nlp.num_cons();
    let hard0 = 2 * nlp.ns;
    let mut h = DMatrix::identity(n + nh, n + nh);
    h.view_mut((0, 0), (n, n)).copy_from(hess);
    let mut g = DVector::from_element(n + nh, weight);
    g.rows_mut(0, n).copy_from(&lin.gradient);
    let mut a = DMatrix::zeros(m + nh, n + nh);
    a.view_mut((0, 0), (m, n)).copy_from(&lin.jac);
    for j in 0..nh {
        a[(hard0 + j, n + j)] = -1.0;
        a[(m + j, n + j)] = -1.0;
    }
    let mut b = DVector::zeros(m + nh);
    b.rows_mut(0, m).copy_from(&(-&lin.cons));
    let sol = solve_qp(&h, &g, &a, &b)?;
    Ok(QpSolution {
        status: sol.status,
        x: sol.x.rows(0, n).into_owned(),
        multipliers: sol.multipliers.rows(0, m).into_owned(),
        active_set: sol.active_set.into_iter().filter(|i| *i < m).collect(),
        iterations: sol.iterations,
    })
}

/// Runs SQP from the problem's starting point. Deterministic for identical
/// inputs. On failure the best iterate seen (lowest merit) is returned.
/// Relative merit change treated as round-off when the predicted decrease is
/// equally small; such steps are accepted without the sufficient decrease test.
pub const ROUNDOFF_MERIT: f64 = 1e-13;

pub fn solve(problem: &OcpProblem, options: &SolverOptions) -> Result<SolveResult> {
    let start = Instant::now();
    let nlp = Nlp {
        p: problem,
        nu: problem.model.num_inputs(),
        ns: problem.model.num_soft(),
        nh: problem.model.num_hard(),
    };
    let (nu, ns) = (nlp.nu, nlp.ns);
    if nu == 0 {
        let (objective, _, _) = nlp.values(&DVector::zeros(ns))?;
        return Ok(SolveResult {
            status: SolveStatus::Converged,
            inputs: DVector::zeros(0),
            slacks: DVector::zeros(ns),
            objective,
            kkt: KktResiduals::default(),
            multipliers: DVector::zeros(nlp.num_cons()),
            max_soft_multiplier: 0.0,
            iterations: 0,
            solve_time_s: start.elapsed().as_secs_f64(),
            merit_history: Vec::new(),
            message: "empty problem".into(),
        });
    }

    let u0 = problem.initial.clone();
    let e0 = problem.model.evaluate(&u0, false)?;
    nlp.check_dims(&e0, false)?;
    let mut w = DVector::zeros(nu + ns);
    w.rows_mut(0, nu).copy_from(&u0);
    for j in 0..ns {
        w[nu + j] = e0.soft[j].max(0.0);
    }

    let mut lin = nlp.linearize(&w)?;
    let mut hess = initial_hessian(nu, ns, lin.eval.gauss_newton.as_ref());
    let mut nu_merit = problem.penalty;
    let mut best: Option<(f64, DVector<f64>, f64)> = None;
    let mut merit_history = Vec::new();
    let mut kkt = KktResiduals {
        stationarity: f64::INFINITY,
        primal: f64::INFINITY,
        complementarity: f64::INFINITY,
    };
    let mut max_soft_multiplier = 0.0;
    let mut multipliers = DVector::zeros(0);
    let mut status = SolveStatus::MaxIter;
    let mut message = String::from("iteration limit reached");
    let mut iterations = 0;
    let mut resets = 0;

    let mut guess: Vec<usize> = (0..lin.cons.len()).filter(|&i| lin.cons[i] >= -1e-9).collect();

    while iterations < options.max_iterations {
        let b = -&lin.cons;
        let mut qp = match solve_qp_warm(&hess, &lin.gradient, &lin.jac, &b, &guess) {
            Ok(q) => q,
            Err(_) => {
                hess = initial_hessian(nu, ns, lin.eval.gauss_newton.as_ref());
                solve_qp(&hess, &lin.gradient, &lin.jac, &b)?
            }
        };
        if qp.status == QpStatus::Infeasible {
            qp = elastic_qp(&nlp, &hess, &lin, 10.0 * nu_merit)?;
            if qp.status == QpStatus::Infeasible {
                status = SolveStatus::NumericalFailure;
                message = "elastic QP infeasible".into();
                break;
            }
        }
        guess = qp.active_set.clone();
        let lambda = &qp.multipliers;
        kkt = kkt_residuals(&lin, lambda);
        multipliers = lambda.clone();
        max_soft_multiplier = (0..ns).fold(0.0f64, |m, j| m.max(lambda[j]));
        let merit_here = lin.objective + nu_merit * violation(&lin.cons);
        if best.as_ref().is_none_or(|(m, _, _)| merit_here < *m) {
            best = Some((merit_here, w.clone(), lin.objective));
        }
        if kkt.max() <= options.tolerance {
            status = SolveStatus::Converged;
            message = "KKT tolerance met".into();
            break;
        }

        iterations += 1;
        let d = qp.x;
        nu_merit = nu_merit.max(1.5 * lambda.amax());
        let phi0 = lin.objective + nu_merit * violation(&lin.cons);
        let dir = lin.gradient.dot(&d) - nu_merit * violation(&lin.cons);
        let noise = ROUNDOFF_MERIT * (1.0 + phi0.abs());
        let armijo = |phi: f64, alpha: f64| {
            phi <= phi0 + 1e-4 * alpha * dir.min(0.0) || (-dir <= noise && phi <= phi0 + noise)
        };
        let merit = |w: &DVector<f64>| {
            let (_, cons, eval) = nlp.values(w).ok()?;
            let mut reset = w.clone();
            for j in 0..ns {
                reset[nu + j] = eval.soft[j].max(0.0);
            }
            let rest = cons.rows(2 * ns, cons.len() - 2 * ns);
            let obj = eval.objective + nlp.p.penalty * reset.rows(nu, ns).sum();
            Some((obj + nu_merit * violation(&rest.into_owned()), cons, reset))
        };

        let mut accepted = None;
        let full = &w + &d;
        match merit(&full) {
            Some((phi, _, reset)) if armijo(phi, 1.0) => accepted = Some((reset, phi)),
            Some((_, cons_full, _)) => {
                // second-order correction for the curvature of the constraints
                let b_soc = -(cons_full - &lin.jac * &d);
                if let Ok(soc) = solve_qp_warm(&hess, &lin.gradient, &lin.jac, &b_soc, &guess) {
                    if soc.status == QpStatus::Optimal {
                        let trial = &w + &soc.x;
                        if let Some((phi, _, reset)) = merit(&trial) {
                            if armijo(phi, 1.0) {
                                accepted = Some((reset, phi));
                            }
                        }
                    }
                }
            }
            None => {}
        }
        let mut alpha = 0.5;
        while accepted.is_none() && alpha > 1e-10 {
            let trial = &w + &d * alpha;
            if let Some((phi, _, reset)) = merit(&trial) {
                if armijo(phi, alpha) {
                    accepted = Some((reset, phi));
                }
            }
            alpha *= 0.5;
        }
        let Some((w_new, phi_new)) = accepted else {
            if resets < 2 {
                resets += 1;
                hess = initial_hessian(nu, ns, lin.eval.gauss_newton.as_ref());
                continue;
            }
            status = SolveStatus::NumericalFailure;
            message = "line search failed".into();
            break;
        };
        merit_history.push((phi0, phi_new));

        let lin_new = nlp.linearize(&w_new)?;
        // damped BFGS on the input block with Lagrangian gradients
        let step = (&w_new - &w).rows(0, nu).into_owned();
        let grad_l = |l: &Linearization| {
            (&l.gradient + l.jac.transpose() * lambda).rows(0, nu).into_owned()
        };
        let y = grad_l(&lin_new) - grad_l(&lin);
        let bu = hess.view((0, 0), (nu, nu)).into_owned();
        let bs = &bu * &step;
        let sbs = step.dot(&bs);
        if sbs > 1e-300 {
            let sy = step.dot(&y);
            let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
            let r = &y * theta + &bs * (1.0 - theta);
            let sr = step.dot(&r);
            if sr > 0.0 {
                let upd = &bu - &bs * bs.transpose() / sbs + &r * r.transpose() / sr;
                hess.view_mut((0, 0), (nu, nu)).copy_from(&upd);
            }
        }
        w = w_new;
        lin = lin_new;
    }

    let (inputs, slacks, objective) = if status == SolveStatus::Converged {
        let (u, s) = nlp.split(&w);
        (u, s, lin.objective)
    } else {
        match best {
            Some((_, bw, obj)) => {
                let (u, s) = nlp.split(&bw);
                (u, s, obj)
            }
            None => {
                let (u, s) = nlp.split(&w);
                (u, s, lin.objective)
            }
        }
    };
    Ok(SolveResult {
        status,
        inputs,
        slacks,
        objective,
        kkt,
        multipliers,
        max_soft_multiplier,
        iterations,
        solve_time_s: start.elapsed().as_secs_f64(),
        merit_history,
        message,
    })
}
