//! Kinematic bicycle model, its RK4 discretization and the constant-velocity
//! prediction model used for target vehicles.
//!
//! States are `(X, Y, v, psi, delta)` measured at the rear axle; inputs are
//! `(a, r)`, acceleration and steering rate. Inputs are held constant over a
//! sampling interval.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STATE_DIM: usize = 5;
pub const INPUT_DIM: usize = 2;

pub type StateVec = SVector<f64, STATE_DIM>;
pub type InputVec = SVector<f64, INPUT_DIM>;
pub type StateMatrix = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type InputMatrix = SMatrix<f64, STATE_DIM, INPUT_DIM>;

/// Index of each state component inside a [`StateVec`].
pub mod idx {
    pub const X: usize = 0;
    pub const Y: usize = 1;
    pub const V: usize = 2;
    pub const PSI: usize = 3;
    pub const DELTA: usize = 4;
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub psi: f64,
    pub delta: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, v: f64, psi: f64, delta: f64) -> Self {
        Self { x, y, v, psi, delta }
    }

    pub fn to_vector(&self) -> StateVec {
        StateVec::new(self.x, self.y, self.v, self.psi, self.delta)
    }

    pub fn from_vector(v: &StateVec) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4])
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|c| c.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentInput {
    pub accel: f64,
    pub steer_rate: f64,
}

impl AgentInput {
    pub fn new(accel: f64, steer_rate: f64) -> Self {
        Self { accel, steer_rate }
    }

    pub fn to_vector(&self) -> InputVec {
        InputVec::new(self.accel, self.steer_rate)
    }

    pub fn from_vector(u: &InputVec) -> Self {
        Self::new(u[0], u[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleGeometry {
    pub wheelbase: f64,
    pub width: f64,
    pub length: f64,
}

impl Default for VehicleGeometry {
    fn default() -> Self {
        Self {
            wheelbase: 2.7,
            width: 1.8,
            length: 4.5,
        }
    }
}

impl VehicleGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.wheelbase > 0.0 && self.width > 0.0 && self.length > 0.0) {
            return Err(Error::invalid(format!(
                "vehicle geometry must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

fn check_steering(delta: f64) -> Result<()> {
    if !(delta.abs() < FRAC_PI_2) {
        return Err(Error::Domain(format!(
            "steering angle {delta} outside (-pi/2, pi/2)"
        )));
    }
    Ok(())
}

fn derivative(x: &StateVec, u: &InputVec, wheelbase: f64) -> StateVec {
    let (v, psi, delta) = (x[idx::V], x[idx::PSI], x[idx::DELTA]);
    StateVec::new(
        v * psi.cos(),
        v * psi.sin(),
        u[0],
        v / wheelbase * delta.tan(),
        u[1],
    )
}

fn derivative_state_jacobian(x: &StateVec, wheelbase: f64) -> StateMatrix {
    let (v, psi, delta) = (x[idx::V], x[idx::PSI], x[idx::DELTA]);
    let (s, c) = psi.sin_cos();
    let sec2 = 1.0 / (delta.cos() * delta.cos());
    let mut j = StateMatrix::zeros();
    j[(0, idx::V)] = c;
    j[(0, idx::PSI)] = -v * s;
    j[(1, idx::V)] = s;
    j[(1, idx::PSI)] = v * c;
    j[(3, idx::V)] = delta.tan() / wheelbase;
    j[(3, idx::DELTA)] = v / wheelbase * sec2;
    j
}

fn derivative_input_jacobian() -> InputMatrix {
    let mut j = InputMatrix::zeros();
    j[(idx::V, 0)] = 1.0;
    j[(idx::DELTA, 1)] = 1.0;
    j
}

/// Continuous-time bicycle dynamics `(v cos psi, v sin psi, a, v tan(delta) / l, r)`.
pub fn bicycle_derivative(
    state: &AgentState,
    input: &AgentInput,
    geom: &VehicleGeometry,
) -> Result<StateVec> {
    check_steering(state.delta)?;
    Ok(derivative(
        &state.to_vector(),
        &input.to_vector(),
        geom.wheelbase,
    ))
}

/// One classical RK4 step on raw vectors.
pub fn rk4_step_vec(x: &StateVec, u: &InputVec, wheelbase: f64, dt: f64) -> Result<StateVec> {
    if dt < 0.0 {
        return Err(Error::invalid(format!("negative time step {dt}")));
    }
    let h = dt;
    check_steering(x[idx::DELTA])?;
    let k1 = derivative(x, u, wheelbase);
    let x2 = x + k1 * (h / 2.0);
    check_steering(x2[idx::DELTA])?;
    let k2 = derivative(&x2, u, wheelbase);
    let x3 = x + k2 * (h / 2.0);
    check_steering(x3[idx::DELTA])?;
    let k3 = derivative(&x3, u, wheelbase);
    let x4 = x + k3 * h;
    check_steering(x4[idx::DELTA])?;
    let k4 = derivative(&x4, u, wheelbase);
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

pub fn rk4_step(
    state: &AgentState,
    input: &AgentInput,
    geom: &VehicleGeometry,
    dt: f64,
) -> Result<AgentState> {
    rk4_step_vec(&state.to_vector(), &input.to_vector(), geom.wheelbase, dt)
        .map(|x| AgentState::from_vector(&x))
}

/// Jacobians of the discrete RK4 map with respect to state and input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteJacobians {
    pub state: StateMatrix,
    pub input: InputMatrix,
}

/// RK4 step returning the successor together with the exact Jacobians of the
/// discrete map, obtained by differentiating through the four stages.
pub fn rk4_step_with_jacobians(
    x: &StateVec,
    u: &InputVec,
    wheelbase: f64,
    dt: f64,
) -> Result<(StateVec, DiscreteJacobians)> {
    if dt < 0.0 {
        return Err(Error::invalid(format!("negative time step {dt}")));
    }
    let h = dt;
    let eye = StateMatrix::identity();
    let fu = derivative_input_jacobian();

    check_steering(x[idx::DELTA])?;
    let k1 = derivative(x, u, wheelbase);
    let a1 = derivative_state_jacobian(x, wheelbase);
    let k1x = a1;
    let k1u = fu;

    let x2 = x + k1 * (h / 2.0);
    check_steering(x2[idx::DELTA])?;
    let k2 = derivative(&x2, u, wheelbase);
    let a2 = derivative_state_jacobian(&x2, wheelbase);
    let k2x = a2 * (eye + k1x * (h / 2.0));
    let k2u = a2 * k1u * (h / 2.0) + fu;

    let x3 = x + k2 * (h / 2.0);
    check_steering(x3[idx::DELTA])?;
    let k3 = derivative(&x3, u, wheelbase);
    let a3 = derivative_state_jacobian(&x3, wheelbase);
    let k3x = a3 * (eye + k2x * (h / 2.0));
    let k3u = a3 * k2u * (h / 2.0) + fu;

    let x4 = x + k3 * h;
    check_steering(x4[idx::DELTA])?;
    let k4 = derivative(&x4, u, wheelbase);
    let a4 = derivative_state_jacobian(&x4, wheelbase);
    let k4x = a4 * (eye + k3x * h);
    let k4u = a4 * k3u * h + fu;

    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    let jac = DiscreteJacobians {
        state: eye + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (h / 6.0),
        input: (k1u + k2u * 2.0 + k3u * 2.0 + k4u) * (h / 6.0),
    };
    Ok((next, jac))
}

pub fn bicycle_jacobians(
    state: &AgentState,
    input: &AgentInput,
    geom: &VehicleGeometry,
    dt: f64,
) -> Result<DiscreteJacobians> {
    rk4_step_with_jacobians(
        &state.to_vector(),
        &input.to_vector(),
        geom.wheelbase,
        dt,
    )
    .map(|(_, j)| j)
}

/// State-transition matrix of the constant-velocity model: `X += dt * v`.
pub fn cv_matrix(dt: f64) -> StateMatrix {
    let mut a = StateMatrix::identity();
    a[(idx::X, idx::V)] = dt;
    a
}

pub fn cv_predict(state: &AgentState, dt: f64) -> AgentState {
    AgentState::from_vector(&(cv_matrix(dt) * state.to_vector()))
}
