//! Assembly of the merge MPC problems.
//!
//! Both controllers optimize the ego input sequence `U = (u_0, .., u_{N-1})`
//! by single shooting. The Follower is predicted with a Gaussian belief: the
//! GP-MPC adds a learned velocity residual whose input contains the ego's own
//! predicted states and inputs, the CV-MPC adds a fixed velocity variance.
//! The Leader is predicted at constant velocity without uncertainty.
//!
//! Derivatives with respect to `U` are propagated forward alongside the
//! rollout, including the derivative of every covariance entry.

use nalgebra::{DMatrix, DVector, Matrix2, RowDVector};
use serde::{Deserialize, Serialize};

use crate::belief::{target_gradient, ResidualChannel};
use crate::error::{Error, Result};
use crate::features::{self, EGO, EGO_INPUT, TARGET, Z_DIM};
use crate::gp::Posterior;
use crate::solver::{build_ocp, OcpEval, OcpModel, OcpProblem};
use crate::vehicle::{
    cv_matrix, idx, rk4_step_with_jacobians, AgentInput, AgentState, InputVec, StateMatrix,
    StateVec, VehicleGeometry,
};

pub const SQRT_EPS: f64 = 1e-9;
/// Hard constraints per prediction step.
pub const HARD_PER_STEP: usize = 7;
/// Softened collision constraints per prediction step (Follower, Leader).
pub const SOFT_PER_STEP: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeLaneGeometry {
    pub target_center: f64,
    pub merge_center: f64,
    pub lane_width: f64,
    pub merge_start: f64,
    pub merge_end: f64,
}

impl Default for MergeLaneGeometry {
    fn default() -> Self {
        Self {
            target_center: 0.0,
            merge_center: -3.5,
            lane_width: 3.5,
            merge_start: 20.0,
            merge_end: 60.0,
        }
    }
}

impl MergeLaneGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.lane_width > 0.0 && self.merge_end > self.merge_start) {
            return Err(Error::invalid("lane width must be positive and the merge interval non-empty"));
        }
        Ok(())
    }

    fn phase(&self, x: f64) -> f64 {
        ((x - self.merge_start) / (self.merge_end - self.merge_start)).clamp(0.0, 1.0)
    }

    /// Lateral position of the merge-lane center at longitudinal position `x`.
    pub fn centerline(&self, x: f64) -> f64 {
        let t = self.phase(x);
        self.merge_center + (self.target_center - self.merge_center) * t * t * (3.0 - 2.0 * t)
    }

    pub fn centerline_slope(&self, x: f64) -> f64 {
        if x <= self.merge_start || x >= self.merge_end {
            return 0.0;
        }
        let t = self.phase(x);
        (self.target_center - self.merge_center) * 6.0 * t * (1.0 - t)
            / (self.merge_end - self.merge_start)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannerWeights {
    pub q: StateMatrix,
    pub r: Matrix2<f64>,
    pub s: Matrix2<f64>,
}

impl Default for PlannerWeights {
    fn default() -> Self {
        Self::from_diagonals([0.0, 1.0, 1.0, 10.0, 10.0], [0.1, 10.0], [1.0, 100.0])
    }
}

impl PlannerWeights {
    pub fn from_diagonals(q: [f64; 5], r: [f64; 2], s: [f64; 2]) -> Self {
        Self {
            q: StateMatrix::from_diagonal(&StateVec::from(q)),
            r: Matrix2::from_diagonal(&nalgebra::Vector2::from(r)),
            s: Matrix2::from_diagonal(&nalgebra::Vector2::from(s)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sym = |m: &DMatrix<f64>| (m - m.transpose()).amax() <= 1e-12;
        let q = DMatrix::from_column_slice(5, 5, self.q.as_slice());
        let r = DMatrix::from_column_slice(2, 2, self.r.as_slice());
        let s = DMatrix::from_column_slice(2, 2, self.s.as_slice());
        if !(sym(&q) && sym(&r) && sym(&s)) {
            return Err(Error::invalid("weight matrices must be symmetric"));
        }
        if q.symmetric_eigenvalues().min() < 0.0 || s.symmetric_eigenvalues().min() < 0.0 {
            return Err(Error::invalid("Q and S must be positive semi-definite"));
        }
        if r.symmetric_eigenvalues().min() <= 0.0 {
            return Err(Error::invalid("R must be positive definite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollisionEllipse {
    pub semi_major: f64,
    pub semi_minor: f64,
    pub sigma: f64,
}

impl Default for CollisionEllipse {
    fn default() -> Self {
        Self {
            semi_major: 6.5,
            semi_minor: 2.2,
            sigma: 2.0,
        }
    }
}

/// Ego state and input limits, angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoBounds {
    pub v_max: f64,
    pub psi_max: f64,
    pub delta_max: f64,
    pub accel_max: f64,
    pub steer_rate_max: f64,
}

impl Default for EgoBounds {
    fn default() -> Self {
        Self {
            v_max: 36.0,
            psi_max: 15f64.to_radians(),
            delta_max: 5f64.to_radians(),
            accel_max: 5.0,
            steer_rate_max: 5f64.to_radians(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub sample_time: f64,
    pub reference_speed: f64,
    pub geometry: MergeLaneGeometry,
    pub vehicle: VehicleGeometry,
    pub weights: PlannerWeights,
    pub ellipse: CollisionEllipse,
    pub bounds: EgoBounds,
    pub penalty: f64,
    /// Fixed velocity-increment variance of the CV-MPC.
    pub cv_velocity_variance: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 12,
            sample_time: 0.25,
            reference_speed: 31.0,
            geometry: MergeLaneGeometry::default(),
            vehicle: VehicleGeometry::default(),
            weights: PlannerWeights::default(),
            ellipse: CollisionEllipse::default(),
            bounds: EgoBounds::default(),
            penalty: 1e4,
            cv_velocity_variance: 0.3,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.vehicle.validate()?;
        self.weights.validate()?;
        if !(self.sample_time > 0.0 && self.penalty > 0.0 && self.cv_velocity_variance >= 0.0) {
            return Err(Error::invalid("sample time and penalty must be positive"));
        }
        let e = &self.ellipse;
        if !(e.semi_major > 0.0 && e.semi_minor > 0.0 && e.sigma >= 0.0) {
            return Err(Error::invalid("ellipse semi-axes must be positive and sigma >= 0"));
        }
        let b = &self.bounds;
        if !(b.v_max > 0.0 && b.psi_max > 0.0 && b.delta_max > 0.0 && b.accel_max > 0.0 && b.steer_rate_max > 0.0) {
            return Err(Error::invalid("ego bounds must be positive"));
        }
        Ok(())
    }

    /// Lower and upper input bounds over the horizon.
    pub fn input_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let n = 2 * self.horizon;
        let hi = DVector::from_fn(n, |i, _| {
            if i % 2 == 0 { self.bounds.accel_max } else { self.bounds.steer_rate_max }
        });
        (-&hi, hi)
    }
}

/// Reference state at longitudinal position `x`; the X entry is unused.
pub fn reference(geom: &MergeLaneGeometry, x: f64, v_ref: f64) -> StateVec {
    StateVec::new(0.0, geom.centerline(x), v_ref, 0.0, 0.0)
}

/// Tracking cost over `traj = (x_1, .., x_N)` and `inputs = (u_0, .., u_{N-1})`,
/// with the first input-rate term taken against `prev_input`.
pub fn objective(
    traj: &[StateVec],
    inputs: &[InputVec],
    prev_input: &InputVec,
    weights: &PlannerWeights,
    geom: &MergeLaneGeometry,
    v_ref: f64,
) -> f64 {
    let mut j = 0.0;
    for x in traj {
        let e = x - reference(geom, x[idx::X], v_ref);
        j += (e.transpose() * weights.q * e)[0];
    }
    let mut prev = *prev_input;
    for u in inputs {
        let du = u - prev;
        j += (u.transpose() * weights.r * u)[0] + (du.transpose() * weights.s * du)[0];
        prev = *u;
    }
    j
}

/// Right road boundary, feasible when `<= 0`.
pub fn road_boundary(geom: &MergeLaneGeometry, ego: &StateVec, vehicle_width: f64) -> f64 {
    geom.centerline(ego[idx::X]) - ego[idx::Y] + (vehicle_width - geom.lane_width) / 2.0
}

/// Geometric center: rear axle advanced by half the vehicle length.
pub fn centroid(state: &StateVec, length: f64) -> (f64, f64) {
    let half = 0.5 * length;
    (
        state[idx::X] + half * state[idx::PSI].cos(),
        state[idx::Y] + half * state[idx::PSI].sin(),
    )
}

/// Tightened ellipse in centroid offsets, feasible when `<= 0`.
pub fn tightened_ellipse_offsets(dx: f64, dy: f64, sigma_xx: f64, ellipse: &CollisionEllipse) -> f64 {
    let a = ellipse.semi_major + ellipse.sigma * (sigma_xx + SQRT_EPS).sqrt();
    1.0 - dx * dx / (a * a) - dy * dy / (ellipse.semi_minor * ellipse.semi_minor)
}

pub fn tightened_ellipse(
    ego: &StateVec,
    target_mean: &StateVec,
    sigma_xx: f64,
    ellipse: &CollisionEllipse,
    length: f64,
) -> f64 {
    let (ex, ey) = centroid(ego, length);
    let (tx, ty) = centroid(target_mean, length);
    tightened_ellipse_offsets(tx - ex, ty - ey, sigma_xx, ellipse)
}

struct EllipseGrad {
    value: f64,
    ego: StateVec,
    target: StateVec,
    sigma_xx: f64,
}

fn tightened_ellipse_grad(
    ego: &StateVec,
    target: &StateVec,
    sigma_xx: f64,
    ellipse: &CollisionEllipse,
    length: f64,
) -> EllipseGrad {
    let half = 0.5 * length;
    let (ex, ey) = centroid(ego, length);
    let (tx, ty) = centroid(target, length);
    let (dx, dy) = (tx - ex, ty - ey);
    let root = (sigma_xx + SQRT_EPS).sqrt();
    let a = ellipse.semi_major + ellipse.sigma * root;
    let b2 = ellipse.semi_minor * ellipse.semi_minor;
    let value = 1.0 - dx * dx / (a * a) - dy * dy / b2;
    let hdx = -2.0 * dx / (a * a);
    let hdy = -2.0 * dy / b2;
    let mut g_ego = StateVec::zeros();
    g_ego[idx::X] = -hdx;
    g_ego[idx::Y] = -hdy;
    g_ego[idx::PSI] = hdx * half * ego[idx::PSI].sin() - hdy * half * ego[idx::PSI].cos();
    let mut g_t = StateVec::zeros();
    g_t[idx::X] = hdx;
    g_t[idx::Y] = hdy;
    g_t[idx::PSI] = -hdx * half * target[idx::PSI].sin() + hdy * half * target[idx::PSI].cos();
    EllipseGrad {
        value,
        ego: g_ego,
        target: g_t,
        sigma_xx: dx * dx * ellipse.sigma / (a * a * a * root),
    }
}

/// Equidistant samples of a trajectory, endpoints included for `m >= 2`.
/// `m = 1` takes the middle sample; `m >= len` returns every sample once.
pub fn inducing_indices(len: usize, m: usize) -> Result<Vec<usize>> {
    if m == 0 || len == 0 {
        return Err(Error::invalid("need at least one inducing point and one sample"));
    }
    if m >= len {
        return Ok((0..len).collect());
    }
    if m == 1 {
        return Ok(vec![(len - 1) / 2]);
    }
    Ok((0..m)
        .map(|j| ((j * (len - 1)) as f64 / (m - 1) as f64).round() as usize)
        .collect())
}

pub fn select_inducing_points(trajectory: &[DVector<f64>], m: usize) -> Result<Vec<DVector<f64>>> {
    Ok(inducing_indices(trajectory.len(), m)?
        .into_iter()
        .map(|i| trajectory[i].clone())
        .collect())
}

/// Measured joint state at the start of a planning step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub ego: AgentState,
    pub follower: AgentState,
    pub leader: AgentState,
    pub prev_input: AgentInput,
}

pub enum TargetModel<'a> {
    Gp(&'a dyn Posterior),
    ConstantVelocity { velocity_variance: f64 },
}

/// Predicted trajectories for a fixed input sequence.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// `N + 1` ego states starting at the measured state.
    pub ego: Vec<StateVec>,
    pub follower_mean: Vec<StateVec>,
    pub follower_cov: Vec<StateMatrix>,
    pub leader: Vec<StateVec>,
    /// Regression inputs along the plan; the last one repeats `u_{N-1}`.
    pub features: Vec<DVector<f64>>,
}

struct Derivatives {
    ego: Vec<DMatrix<f64>>,
    follower_mean: Vec<DMatrix<f64>>,
    /// `follower_cov[i][c]`: derivative of the step-i covariance w.r.t. input c.
    follower_cov: Vec<Vec<StateMatrix>>,
}

/// GP-MPC or CV-MPC instance at one time step.
pub struct MergeOcp<'a> {
    config: &'a PlannerConfig,
    scene: Scene,
    target: TargetModel<'a>,
    channel: ResidualChannel,
}

pub fn assemble_gp_mpc<'a>(scene: &Scene, gp: &'a dyn Posterior, config: &'a PlannerConfig) -> Result<MergeOcp<'a>> {
    config.validate()?;
    if gp.input_dim() != Z_DIM {
        return Err(Error::invalid("GP input dimension does not match the merge feature layout"));
    }
    Ok(MergeOcp {
        config,
        scene: *scene,
        target: TargetModel::Gp(gp),
        channel: ResidualChannel::velocity(),
    })
}

pub fn assemble_cv_mpc<'a>(scene: &Scene, config: &'a PlannerConfig) -> Result<MergeOcp<'a>> {
    config.validate()?;
    Ok(MergeOcp {
        config,
        scene: *scene,
        target: TargetModel::ConstantVelocity {
            velocity_variance: config.cv_velocity_variance,
        },
        channel: ResidualChannel::velocity(),
    })
}

fn inputs_at(u: &DVector<f64>, i: usize) -> InputVec {
    InputVec::new(u[2 * i], u[2 * i + 1])
}

impl<'a> MergeOcp<'a> {
    pub fn config(&self) -> &PlannerConfig {
        self.config
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    /// Wraps the instance into a solver problem with the configured bounds.
    pub fn problem(&self, warm_start: Option<&DVector<f64>>, check_derivatives: bool) -> Result<OcpProblem<'_>> {
        let (lo, hi) = self.config.input_bounds();
        build_ocp(self, lo, hi, self.config.penalty, warm_start, check_derivatives)
    }

    pub fn predict(&self, u: &DVector<f64>) -> Result<Prediction> {
        self.rollout(u, false).map(|(p, _)| p)
    }

    fn rollout(&self, u: &DVector<f64>, derivatives: bool) -> Result<(Prediction, Option<Derivatives>)> {
        let n = self.config.horizon;
        let nu = 2 * n;
        if u.len() != nu {
            return Err(Error::invalid(format!("expected {nu} inputs, got {}", u.len())));
        }
        let dt = self.config.sample_time;
        let wb = self.config.vehicle.wheelbase;
        let a = cv_matrix(dt);
        let b = *self.channel.input();
        let bbt = b * b.transpose();

        let mut ego = vec![self.scene.ego.to_vector()];
        let mut mean = vec![self.scene.follower.to_vector()];
        let mut cov = vec![StateMatrix::zeros()];
        let mut leader = vec![self.scene.leader.to_vector()];
        let mut feats = Vec::with_capacity(n + 1);

        let mut d = derivatives.then(|| Derivatives {
            ego: vec![DMatrix::zeros(5, nu)],
            follower_mean: vec![DMatrix::zeros(5, nu)],
            follower_cov: vec![vec![StateMatrix::zeros(); nu]],
        });

        for i in 0..n {
            let ui = inputs_at(u, i);
            let (x0, mu, sig, x2) = (ego[i], mean[i], cov[i], leader[i]);
            let z = features::assemble(&x0, &mu, &x2, &ui);

            let (ego_next, jac) = rk4_step_with_jacobians(&x0, &ui, wb, dt)?;
            let (mu_next, sig_next) = match &self.target {
                TargetModel::ConstantVelocity { velocity_variance } => {
                    if let Some(d) = d.as_mut() {
                        let p = &d.follower_mean[i];
                        let pn = DMatrix::from_column_slice(5, 5, a.as_slice()) * p;
                        d.follower_mean.push(pn);
                        let dc: Vec<StateMatrix> =
                            d.follower_cov[i].iter().map(|ds| a * ds * a.transpose()).collect();
                        d.follower_cov.push(dc);
                    }
                    (a * mu, a * sig * a.transpose() + bbt * *velocity_variance)
                }
                TargetModel::Gp(gp) => {
                    let (eval, curv) = if d.is_some() {
                        let c = gp.posterior_with_curvature(&z)?;
                        (c.eval.clone(), Some(c))
                    } else {
                        (gp.posterior(&z)?, None)
                    };
                    let g = target_gradient(&eval);
                    let sg = sig * g;
                    let var = eval.variance + g.dot(&sg);
                    let cross = a * sg * b.transpose();
                    let sig_next = a * sig * a.transpose() + cross + cross.transpose() + bbt * var;
                    if let (Some(d), Some(curv)) = (d.as_mut(), curv) {
                        // dz = [E; P; 0; S_i]
                        let mut dz = DMatrix::zeros(Z_DIM, nu);
                        dz.rows_mut(EGO.start, 5).copy_from(&d.ego[i]);
                        dz.rows_mut(TARGET.start, 5).copy_from(&d.follower_mean[i]);
                        dz[(EGO_INPUT.start, 2 * i)] = 1.0;
                        dz[(EGO_INPUT.start + 1, 2 * i + 1)] = 1.0;
                        let dm: RowDVector<f64> = curv.eval.mean_gradient.transpose() * &dz;
                        let ds: RowDVector<f64> = curv.variance_gradient.transpose() * &dz;
                        let dg = curv.mean_hessian.rows(TARGET.start, 5) * &dz;
                        let a_dyn = DMatrix::from_column_slice(5, 5, a.as_slice());
                        let b_dyn = DMatrix::from_column_slice(5, 1, b.as_slice());
                        let pn = &a_dyn * &d.follower_mean[i] + &b_dyn * &dm;
                        d.follower_mean.push(pn);
                        let active = (2 * i + 2).min(nu);
                        let mut dc = vec![StateMatrix::zeros(); nu];
                        for c in 0..active {
                            let dsig = &d.follower_cov[i][c];
                            let dgc = StateVec::from_iterator(dg.column(c).iter().copied());
                            let dsg = dsig * g + sig * dgc;
                            let dvar = ds[c] + 2.0 * dgc.dot(&sg) + g.dot(&(dsig * g));
                            let dcross = a * dsg * b.transpose();
                            dc[c] = a * dsig * a.transpose() + dcross + dcross.transpose() + bbt * dvar;
                        }
                        d.follower_cov.push(dc);
                    }
                    (a * mu + b * eval.mean, sig_next)
                }
            };

            if let Some(d) = d.as_mut() {
                let fx = DMatrix::from_column_slice(5, 5, jac.state.as_slice());
                let mut en = &fx * &d.ego[i];
                for r in 0..5 {
                    en[(r, 2 * i)] += jac.input[(r, 0)];
                    en[(r, 2 * i + 1)] += jac.input[(r, 1)];
                }
                d.ego.push(en);
            }
            feats.push(z);
            ego.push(ego_next);
            mean.push(mu_next);
            cov.push(sig_next);
            leader.push(a * x2);
        }
        let last_u = if n > 0 { inputs_at(u, n - 1) } else { self.scene.prev_input.to_vector() };
        feats.push(features::assemble(&ego[n], &mean[n], &leader[n], &last_u));

        Ok((
            Prediction {
                ego,
                follower_mean: mean,
                follower_cov: cov,
                leader,
                features: feats,
            },
            d,
        ))
    }

    fn evaluate_impl(&self, u: &DVector<f64>, derivatives: bool) -> Result<OcpEval> {
        let cfg = self.config;
        let n = cfg.horizon;
        let nu = 2 * n;
        let (pred, d) = self.rollout(u, derivatives)?;
        let geom = &cfg.geometry;
        let w = &cfg.weights;
        let len = cfg.vehicle.length;
        let vref = cfg.reference_speed;

        let mut soft = DVector::zeros(SOFT_PER_STEP * n);
        let mut hard = DVector::zeros(HARD_PER_STEP * n);
        let mut grad = DVector::zeros(nu);
        let mut soft_jac = DMatrix::zeros(if derivatives { SOFT_PER_STEP * n } else { 0 }, nu);
        let mut hard_jac = DMatrix::zeros(if derivatives { HARD_PER_STEP * n } else { 0 }, nu);
        let mut gn = DMatrix::zeros(if derivatives { nu } else { 0 }, nu);

        let mut objective = 0.0;
        let left_edge = geom.target_center + (geom.lane_width - cfg.vehicle.width) / 2.0;
        let b = &cfg.bounds;
        for i in 1..=n {
            let x = &pred.ego[i];
            let e = x - reference(geom, x[idx::X], vref);
            let qe = w.q * e;
            objective += e.dot(&qe);

            let hc_f = tightened_ellipse_grad(x, &pred.follower_mean[i], pred.follower_cov[i][(0, 0)], &cfg.ellipse, len);
            let hc_l = tightened_ellipse_grad(x, &pred.leader[i], 0.0, &cfg.ellipse, len);
            soft[SOFT_PER_STEP * (i - 1)] = hc_f.value;
            soft[SOFT_PER_STEP * (i - 1) + 1] = hc_l.value;

            let h0 = HARD_PER_STEP * (i - 1);
            hard[h0] = road_boundary(geom, x, cfg.vehicle.width);
            hard[h0 + 1] = x[idx::Y] - left_edge;
            hard[h0 + 2] = x[idx::V] - b.v_max;
            hard[h0 + 3] = x[idx::PSI] - b.psi_max;
            hard[h0 + 4] = -x[idx::PSI] - b.psi_max;
            hard[h0 + 5] = x[idx::DELTA] - b.delta_max;
            hard[h0 + 6] = -x[idx::DELTA] - b.delta_max;

            if let Some(d) = d.as_ref() {
                let ei = &d.ego[i];
                let slope = geom.centerline_slope(x[idx::X]);
                // de/dx = I - e_Y m'(X) e_X^T
                let mut de = DMatrix::<f64>::identity(5, 5);
                de[(idx::Y, idx::X)] = -slope;
                let je = &de * ei;
                let qd = DMatrix::from_column_slice(5, 5, w.q.as_slice());
                let qe_d = DVector::from_column_slice(qe.as_slice());
                grad += je.tr_mul(&qe_d) * 2.0;
                gn += je.tr_mul(&(&qd * &je)) * 2.0;

                let row_f = row(&hc_f.ego, ei)
                    + row(&hc_f.target, &d.follower_mean[i])
                    + RowDVector::from_fn(nu, |_, c| hc_f.sigma_xx * d.follower_cov[i][c][(0, 0)]);
                soft_jac.set_row(SOFT_PER_STEP * (i - 1), &row_f);
                soft_jac.set_row(SOFT_PER_STEP * (i - 1) + 1, &row(&hc_l.ego, ei));

                let mut hr = StateVec::zeros();
                hr[idx::X] = slope;
                hr[idx::Y] = -1.0;
                hard_jac.set_row(h0, &row(&hr, ei));
                hard_jac.set_row(h0 + 1, &ei.row(idx::Y));
                hard_jac.set_row(h0 + 2, &ei.row(idx::V));
                hard_jac.set_row(h0 + 3, &ei.row(idx::PSI));
                hard_jac.set_row(h0 + 4, &(-ei.row(idx::PSI)));
                hard_jac.set_row(h0 + 5, &ei.row(idx::DELTA));
                hard_jac.set_row(h0 + 6, &(-ei.row(idx::DELTA)));
            }
        }

        let mut prev = self.scene.prev_input.to_vector();
        for i in 0..n {
            let ui = inputs_at(u, i);
            let du = ui - prev;
            let ru = w.r * ui;
            let sdu = w.s * du;
            objective += ui.dot(&ru) + du.dot(&sdu);
            if derivatives {
                for k in 0..2 {
                    grad[2 * i + k] += 2.0 * (ru[k] + sdu[k]);
                    if i + 1 < n {
                        // next step's rate term depends on u_i with a minus sign
                        let un = inputs_at(u, i + 1);
                        let sdn = w.s * (un - ui);
                        grad[2 * i + k] -= 2.0 * sdn[k];
                    }
                    for l in 0..2 {
                        gn[(2 * i + k, 2 * i + l)] += 2.0 * (w.r[(k, l)] + w.s[(k, l)]);
                        if i + 1 < n {
                            gn[(2 * i + k, 2 * i + l)] += 2.0 * w.s[(k, l)];
                            gn[(2 * i + k, 2 * (i + 1) + l)] -= 2.0 * w.s[(k, l)];
                            gn[(2 * (i + 1) + k, 2 * i + l)] -= 2.0 * w.s[(k, l)];
                        }
                    }
                }
            }
            prev = ui;
        }

        Ok(OcpEval {
            objective,
            gradient: grad,
            soft,
            soft_jacobian: soft_jac,
            hard,
            hard_jacobian: hard_jac,
            gauss_newton: derivatives.then_some(gn),
        })
    }
}

fn row(g: &StateVec, sens: &DMatrix<f64>) -> RowDVector<f64> {
    DVector::from_column_slice(g.as_slice()).transpose() * sens
}

impl OcpModel for MergeOcp<'_> {
    fn num_inputs(&self) -> usize {
        2 * self.config.horizon
    }

    fn num_soft(&self) -> usize {
        SOFT_PER_STEP * self.config.horizon
    }

    fn num_hard(&self) -> usize {
        HARD_PER_STEP * self.config.horizon
    }

    fn evaluate(&self, inputs: &DVector<f64>, derivatives: bool) -> Result<OcpEval> {
        self.evaluate_impl(inputs, derivatives)
    }
}

/// Standard receding-horizon shift: drop the first input and repeat the last.
pub fn shift_inputs(u: &DVector<f64>) -> DVector<f64> {
    let n = u.len();
    if n < 4 {
        return u.clone();
    }
    let mut out = DVector::zeros(n);
    out.rows_mut(0, n - 2).copy_from(&u.rows(2, n - 2));
    out[n - 2] = u[n - 2];
    out[n - 1] = u[n - 1];
    out
}

pub fn first_input(u: &DVector<f64>) -> AgentInput {
    if u.len() < 2 {
        return AgentInput::new(0.0, 0.0);
    }
    AgentInput::new(u[0], u[1])
}
