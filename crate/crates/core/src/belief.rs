//! Moment propagation of a target vehicle's state through nominal dynamics
//! plus a learned scalar residual.
//!
//! At every prediction step the state and the residual are treated as
//! jointly Gaussian. The residual moments come from a first-order expansion
//! of the posterior mean around the predicted mean input, and consecutive
//! residual evaluations are independent:
//!
//! ```text
//! mu_d   = m(mu_z)
//! S_xd   = S_x g,            g = d m / d x_target
//! S_d    = s(mu_z) + g^T S_x g
//! mu_x'  = f(mu_x) + B mu_d
//! S_x'   = [F B] [[S_x, S_xd], [S_xd^T, S_d]] [F B]^T
//! ```

use nalgebra::{DVector, DMatrix, RowSVector, SMatrix};

use crate::error::{Error, Result};
use crate::features::{self, TARGET};
use crate::gp::{Posterior, PosteriorCurvature, PosteriorEval};
use crate::vehicle::{cv_matrix, idx, AgentState, InputVec, StateMatrix, StateVec};

const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBelief {
    mean: StateVec,
    covariance: StateMatrix,
}

impl GaussianBelief {
    /// Builds a belief, symmetrizing the covariance and flooring negative
    /// eigenvalues at zero.
    pub fn new(mean: StateVec, covariance: StateMatrix) -> Self {
        Self {
            mean,
            covariance: symmetrize_and_floor(&covariance),
        }
    }

    pub fn deterministic(mean: StateVec) -> Self {
        Self {
            mean,
            covariance: StateMatrix::zeros(),
        }
    }

    pub fn mean(&self) -> &StateVec {
        &self.mean
    }

    pub fn covariance(&self) -> &StateMatrix {
        &self.covariance
    }

    /// Variance of the longitudinal position.
    pub fn position_variance(&self) -> f64 {
        self.covariance[(idx::X, idx::X)]
    }
}

pub(crate) fn symmetrize_and_floor(c: &StateMatrix) -> StateMatrix {
    let sym = (c + c.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.min() >= 0.0 {
        return sym;
    }
    let floored = eig.eigenvalues.map(|l| l.max(0.0));
    let v = eig.eigenvectors;
    let out = v * StateMatrix::from_diagonal(&floored) * v.transpose();
    (out + out.transpose()) * 0.5
}

/// Blocks of the joint covariance of `(x, d)` at one prediction step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointStepCovariance {
    pub state_block: StateMatrix,
    pub cross_block: StateVec,
    pub gp_block: f64,
}

impl JointStepCovariance {
    pub fn to_matrix(&self) -> SMatrix<f64, 6, 6> {
        let mut m = SMatrix::<f64, 6, 6>::zeros();
        m.fixed_view_mut::<5, 5>(0, 0).copy_from(&self.state_block);
        m.fixed_view_mut::<5, 1>(0, 5).copy_from(&self.cross_block);
        m.fixed_view_mut::<1, 5>(5, 0)
            .copy_from(&self.cross_block.transpose());
        m[(5, 5)] = self.gp_block;
        m
    }
}

/// Column `B` through which the scalar residual enters the state update,
/// with its left pseudo-inverse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualChannel {
    input: StateVec,
    pseudo_inverse: RowSVector<f64, 5>,
}

impl ResidualChannel {
    pub fn new(input: StateVec) -> Result<Self> {
        let gram = input.norm_squared();
        if !(gram > 0.0) || !gram.is_finite() {
            return Err(Error::invalid("residual input column must be non-zero"));
        }
        Ok(Self {
            input,
            pseudo_inverse: input.transpose() / gram,
        })
    }

    /// Residual acting on the longitudinal velocity.
    pub fn velocity() -> Self {
        let mut b = StateVec::zeros();
        b[idx::V] = 1.0;
        Self::new(b).expect("unit column")
    }

    pub fn input(&self) -> &StateVec {
        &self.input
    }

    pub fn pseudo_inverse(&self) -> &RowSVector<f64, 5> {
        &self.pseudo_inverse
    }

    /// Residual sample `B^+ (x_next - f(x))`.
    pub fn project(&self, delta: &StateVec) -> f64 {
        (self.pseudo_inverse * delta)[0]
    }
}

/// Known part of the target's dynamics.
pub trait NominalModel: Send + Sync {
    fn predict(&self, x: &StateVec) -> StateVec;
    fn jacobian(&self, x: &StateVec) -> StateMatrix;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantVelocity {
    pub dt: f64,
}

impl NominalModel for ConstantVelocity {
    fn predict(&self, x: &StateVec) -> StateVec {
        cv_matrix(self.dt) * x
    }

    fn jacobian(&self, _x: &StateVec) -> StateMatrix {
        cv_matrix(self.dt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearNominal(pub StateMatrix);

impl NominalModel for LinearNominal {
    fn predict(&self, x: &StateVec) -> StateVec {
        self.0 * x
    }

    fn jacobian(&self, _x: &StateVec) -> StateMatrix {
        self.0
    }
}

/// The deterministic part of the regression input at one prediction step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Companion {
    pub ego: StateVec,
    pub leader: StateVec,
    pub ego_input: InputVec,
}

impl Companion {
    pub fn feature(&self, target: &StateVec) -> DVector<f64> {
        features::assemble(&self.ego, target, &self.leader, &self.ego_input)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaylorMoments {
    pub mean: f64,
    pub cross: StateVec,
    pub variance: f64,
}

impl TaylorMoments {
    pub fn zero() -> Self {
        Self {
            mean: 0.0,
            cross: StateVec::zeros(),
            variance: 0.0,
        }
    }

    pub fn joint(&self, belief: &GaussianBelief) -> JointStepCovariance {
        JointStepCovariance {
            state_block: *belief.covariance(),
            cross_block: self.cross,
            gp_block: self.variance,
        }
    }
}

pub fn target_gradient(eval: &PosteriorEval) -> StateVec {
    StateVec::from_iterator(eval.mean_gradient.rows(TARGET.start, 5).iter().copied())
}

pub fn taylor_moments(
    gp: &dyn Posterior,
    belief: &GaussianBelief,
    companion: &Companion,
) -> Result<TaylorMoments> {
    let eval = gp.posterior(&companion.feature(belief.mean()))?;
    let g = target_gradient(&eval);
    let cross = belief.covariance() * g;
    Ok(TaylorMoments {
        mean: eval.mean,
        cross,
        variance: eval.variance + g.dot(&cross),
    })
}

pub fn propagate_step(
    nominal: &dyn NominalModel,
    channel: &ResidualChannel,
    belief: &GaussianBelief,
    moments: &TaylorMoments,
) -> GaussianBelief {
    propagate_step_with_noise(nominal, channel, belief, moments, None)
}

fn propagate_step_with_noise(
    nominal: &dyn NominalModel,
    channel: &ResidualChannel,
    belief: &GaussianBelief,
    moments: &TaylorMoments,
    process_noise: Option<&StateMatrix>,
) -> GaussianBelief {
    let mu = belief.mean();
    let mean = nominal.predict(mu) + channel.input() * moments.mean;
    let mut g = SMatrix::<f64, 5, 6>::zeros();
    g.fixed_view_mut::<5, 5>(0, 0).copy_from(&nominal.jacobian(mu));
    g.fixed_view_mut::<5, 1>(0, 5).copy_from(channel.input());
    let mut cov = g * moments.joint(belief).to_matrix() * g.transpose();
    if let Some(w) = process_noise {
        cov += w;
    }
    GaussianBelief::new(mean, cov)
}

/// Propagation settings for one target.
pub struct Propagator<'a> {
    pub nominal: &'a dyn NominalModel,
    pub channel: ResidualChannel,
    /// Additive process-noise covariance; `None` for a noise-free target.
    pub process_noise: Option<StateMatrix>,
}

impl<'a> Propagator<'a> {
    pub fn new(nominal: &'a dyn NominalModel, channel: ResidualChannel) -> Self {
        Self {
            nominal,
            channel,
            process_noise: None,
        }
    }

    pub fn step(
        &self,
        gp: &dyn Posterior,
        belief: &GaussianBelief,
        companion: &Companion,
    ) -> Result<GaussianBelief> {
        let moments = taylor_moments(gp, belief, companion)?;
        Ok(propagate_step_with_noise(
            self.nominal,
            &self.channel,
            belief,
            &moments,
            self.process_noise.as_ref(),
        ))
    }

    pub fn horizon(
        &self,
        gp: &dyn Posterior,
        initial: &AgentState,
        companions: &[Companion],
    ) -> Result<Vec<GaussianBelief>> {
        let mut out = Vec::with_capacity(companions.len() + 1);
        out.push(GaussianBelief::deterministic(initial.to_vector()));
        for companion in companions {
            let next = self.step(gp, out.last().expect("non-empty"), companion)?;
            out.push(next);
        }
        Ok(out)
    }
}

/// Beliefs over the horizon, starting from the measured state with zero
/// covariance. Returns `companions.len() + 1` beliefs.
pub fn propagate_horizon(
    gp: &dyn Posterior,
    nominal: &dyn NominalModel,
    channel: &ResidualChannel,
    initial: &AgentState,
    companions: &[Companion],
) -> Result<Vec<GaussianBelief>> {
    Propagator::new(nominal, *channel).horizon(gp, initial, companions)
}

/// Checks the covariance invariants of a belief.
pub fn is_valid_covariance(c: &StateMatrix) -> bool {
    let asym = (c - c.transpose()).abs().max();
    asym <= SYMMETRY_TOL && c.symmetric_eigenvalues().min() >= -1e-8
}

/// Residual with an affine mean `w^T z + b` and constant variance.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianResidual {
    pub weights: DVector<f64>,
    pub offset: f64,
    pub variance: f64,
}

impl Posterior for LinearGaussianResidual {
    fn input_dim(&self) -> usize {
        self.weights.len()
    }

    fn posterior(&self, z: &DVector<f64>) -> Result<PosteriorEval> {
        if z.len() != self.weights.len() {
            return Err(Error::invalid("input dimension mismatch"));
        }
        Ok(PosteriorEval {
            mean: self.weights.dot(z) + self.offset,
            variance: self.variance,
            mean_gradient: self.weights.clone(),
        })
    }

    fn posterior_with_curvature(&self, z: &DVector<f64>) -> Result<PosteriorCurvature> {
        let n = self.weights.len();
        Ok(PosteriorCurvature {
            eval: self.posterior(z)?,
            mean_hessian: DMatrix::zeros(n, n),
            variance_gradient: DVector::zeros(n),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{fit, KernelParams, TrainingSet};

    const TS: f64 = 0.25;

    fn companion() -> Companion {
        Companion {
            ego: StateVec::new(-80.0, -3.5, 31.0, 0.0, 0.0),
            leader: StateVec::new(0.0, 0.0, 25.0, 0.0, 0.0),
            ego_input: InputVec::new(0.5, 0.0),
        }
    }

    fn follower() -> StateVec {
        StateVec::new(-75.0, 0.0, 31.0, 0.0, 0.0)
    }

    fn empty_gp() -> crate::gp::GpModel {
        fit(&KernelParams::merge_default(), &TrainingSet::new()).unwrap()
    }

    fn trained_gp() -> crate::gp::GpModel {
        let c = companion();
        let mut set = TrainingSet::new();
        for k in 0..5 {
            let mut x = follower();
            x[0] += 3.0 * k as f64;
            x[2] -= 0.4 * k as f64;
            set.push(c.feature(&x), -0.2 * k as f64);
        }
        fit(&KernelParams::merge_default(), &set).unwrap()
    }

    #[test]
    fn channel_pseudo_inverse() {
        let ch = ResidualChannel::new(StateVec::new(0.0, 1.0, 2.0, 0.0, 0.0)).unwrap();
        assert!(((ch.pseudo_inverse() * ch.input())[0] - 1.0).abs() < 1e-12);
        assert!(ResidualChannel::new(StateVec::zeros()).is_err());
    }

    #[test]
    fn zero_state_covariance_kills_linear_terms() {
        let gp = trained_gp();
        let b = GaussianBelief::deterministic(follower());
        let m = taylor_moments(&gp, &b, &companion()).unwrap();
        let e = gp.posterior(&companion().feature(&follower())).unwrap();
        assert_eq!(m.cross, StateVec::zeros());
        assert_eq!(m.variance, e.variance);
    }

    #[test]
    fn empty_gp_moments_are_the_prior() {
        let mut cov = StateMatrix::identity();
        cov[(0, 2)] = 0.2;
        cov[(2, 0)] = 0.2;
        let b = GaussianBelief::new(follower(), cov);
        let m = taylor_moments(&empty_gp(), &b, &companion()).unwrap();
        assert_eq!(m.mean, 0.0);
        assert_eq!(m.variance, 0.3);
    }

    #[test]
    fn linear_mean_adds_quadratic_form() {
        let mut w = DVector::zeros(features::Z_DIM);
        let a = [0.1, -0.2, 0.3, 0.05, 0.0];
        for (i, ai) in a.iter().enumerate() {
            w[TARGET.start + i] = *ai;
        }
        w[0] = 0.7; // ego components do not enter the state quadratic form
        let lin = LinearGaussianResidual {
            weights: w,
            offset: 0.0,
            variance: 0.05,
        };
        let cov = StateMatrix::from_fn(|r, c| if r == c { 1.0 + r as f64 } else { 0.1 });
        let b = GaussianBelief::new(follower(), cov);
        let m = taylor_moments(&lin, &b, &companion()).unwrap();
        let av = StateVec::from_column_slice(&a);
        let expected = 0.05 + (av.transpose() * cov * av)[0];
        assert!((m.variance - expected).abs() < 1e-14);
    }

    #[test]
    fn prior_step_matches_baseline_variance() {
        let b = GaussianBelief::deterministic(follower());
        let m = taylor_moments(&empty_gp(), &b, &companion()).unwrap();
        let next = propagate_step(&ConstantVelocity { dt: TS }, &ResidualChannel::velocity(), &b, &m);
        let mut expected = StateMatrix::zeros();
        expected[(2, 2)] = 0.3;
        assert_eq!(*next.covariance(), expected);
        assert_eq!(next.mean()[0], -75.0 + TS * 31.0);
    }

    #[test]
    fn identity_dynamics_with_zero_residual_is_stationary() {
        let cov = StateMatrix::from_diagonal(&StateVec::new(1.0, 2.0, 0.5, 0.1, 0.01));
        let b = GaussianBelief::new(follower(), cov);
        let next = propagate_step(
            &LinearNominal(StateMatrix::identity()),
            &ResidualChannel::velocity(),
            &b,
            &TaylorMoments::zero(),
        );
        assert_eq!(next, b);
    }

    #[test]
    fn three_steps_match_hand_unrolled_recursion() {
        let f = StateMatrix::from_fn(|r, c| if r == c { 1.0 } else { 0.01 * (r + 2 * c) as f64 });
        let ch = ResidualChannel::velocity();
        let moments = TaylorMoments {
            mean: 0.2,
            cross: StateVec::new(0.01, 0.0, 0.02, 0.0, 0.0),
            variance: 0.3,
        };
        let b0 = GaussianBelief::new(follower(), StateMatrix::identity() * 0.1);
        let mut b = b0;
        for _ in 0..3 {
            b = propagate_step(&LinearNominal(f), &ch, &b, &moments);
        }
        // unrolled by hand
        let bv = *ch.input();
        let step = |m: StateVec, s: StateMatrix| {
            let m2 = f * m + bv * 0.2;
            let s2 = f * s * f.transpose()
                + f * moments.cross * bv.transpose()
                + bv * moments.cross.transpose() * f.transpose()
                + bv * bv.transpose() * 0.3;
            (m2, s2)
        };
        let (m1, s1) = step(*b0.mean(), *b0.covariance());
        let (m2, s2) = step(m1, s1);
        let (m3, s3) = step(m2, s2);
        assert!((b.mean() - m3).norm() < 1e-12);
        assert!((b.covariance() - s3).norm() < 1e-12);
    }

    #[test]
    fn horizon_of_empty_gp_grows_velocity_variance_linearly() {
        let companions = vec![companion(); 12];
        let beliefs = propagate_horizon(
            &empty_gp(),
            &ConstantVelocity { dt: TS },
            &ResidualChannel::velocity(),
            &AgentState::from_vector(&follower()),
            &companions,
        )
        .unwrap();
        assert_eq!(beliefs.len(), 13);
        for (i, b) in beliefs.iter().enumerate() {
            assert!((b.covariance()[(2, 2)] - 0.3 * i as f64).abs() < 1e-12);
            assert!(is_valid_covariance(b.covariance()));
        }
    }

    #[test]
    fn empty_horizon_returns_initial_state() {
        let s = AgentState::from_vector(&follower());
        let beliefs = propagate_horizon(
            &empty_gp(),
            &ConstantVelocity { dt: TS },
            &ResidualChannel::velocity(),
            &s,
            &[],
        )
        .unwrap();
        assert_eq!(beliefs, vec![GaussianBelief::deterministic(follower())]);
    }

    #[test]
    fn flooring_removes_negative_eigenvalues() {
        let mut c = StateMatrix::identity();
        c[(0, 0)] = -1e-12;
        let b = GaussianBelief::new(follower(), c);
        assert!(b.covariance().symmetric_eigenvalues().min() >= -1e-15);
    }
}
