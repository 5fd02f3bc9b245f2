//! Driver policies for the target vehicles.
//!
//! The Follower runs an Intelligent Driver Model that also reacts to a
//! vehicle merging into its lane. The merge reaction scales the longitudinal
//! gap to the merging vehicle by a lateral activation weight, so that a
//! vehicle still in the adjacent lane is ignored and a fully merged vehicle
//! is treated like an ordinary leader. The most restrictive of the two IDM
//! responses (leader, merging ego) is applied. The Leader keeps its speed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vehicle::{AgentInput, AgentState};

/// Acceleration bound shared by all vehicles in the scenario [m/s^2].
pub const ACCEL_LIMIT: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    pub desired_speed: f64,
    pub time_headway: f64,
    pub max_accel: f64,
    pub comfortable_decel: f64,
    pub min_gap: f64,
    pub accel_exponent: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            desired_speed: 31.0,
            time_headway: 1.0,
            max_accel: 3.0,
            comfortable_decel: 3.0,
            min_gap: 2.0,
            accel_exponent: 4.0,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.desired_speed,
            self.time_headway,
            self.max_accel,
            self.comfortable_decel,
            self.min_gap,
            self.accel_exponent,
        ];
        if all.iter().all(|p| *p > 0.0 && p.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "IDM parameters must be positive: {self:?}"
            )))
        }
    }
}

/// IDM acceleration for a vehicle at speed `v` behind an obstacle `gap`
/// metres ahead, approaching it at `closing_speed`. Non-positive gaps return
/// full braking. The output is clamped to `[-ACCEL_LIMIT, ACCEL_LIMIT]`.
pub fn idm_accel(params: &IdmParams, v: f64, gap: f64, closing_speed: f64) -> f64 {
    if gap <= 0.0 {
        return -ACCEL_LIMIT;
    }
    let brake_term = 2.0 * (params.max_accel * params.comfortable_decel).sqrt();
    let desired_gap = params.min_gap
        + (v * params.time_headway + v * closing_speed / brake_term).max(0.0);
    let free = (v / params.desired_speed).powf(params.accel_exponent);
    let interaction = (desired_gap / gap).powi(2);
    (params.max_accel * (1.0 - free - interaction)).clamp(-ACCEL_LIMIT, ACCEL_LIMIT)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeReactiveConfig {
    pub idm: IdmParams,
    /// Lateral offset at which the merging vehicle stops counting [m].
    pub lane_width: f64,
    pub vehicle_length: f64,
    /// Horizon over which the ego's known acceleration is used to predict its
    /// speed in the closing-speed term [s].
    pub anticipation_time: f64,
    /// Lower bound on the bumper gap to the merging vehicle before scaling [m].
    pub min_raw_gap: f64,
    pub weight_floor: f64,
}

impl Default for MergeReactiveConfig {
    fn default() -> Self {
        Self {
            idm: IdmParams::default(),
            lane_width: 3.5,
            vehicle_length: 4.5,
            anticipation_time: 0.25,
            min_raw_gap: 0.1,
            weight_floor: 1e-6,
        }
    }
}

impl MergeReactiveConfig {
    /// Smooth lateral activation: 1 at zero offset, 0 beyond one lane width.
    pub fn lateral_weight(&self, lateral_offset: f64) -> f64 {
        let t = (1.0 - lateral_offset.abs() / self.lane_width).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    }

    pub fn validate(&self) -> Result<()> {
        self.idm.validate()?;
        if !(self.lane_width > 0.0 && self.vehicle_length > 0.0 && self.min_raw_gap > 0.0) {
            return Err(Error::invalid("merge-reactive geometry must be positive"));
        }
        if !(self.anticipation_time >= 0.0 && self.weight_floor > 0.0) {
            return Err(Error::invalid("merge-reactive tuning must be non-negative"));
        }
        Ok(())
    }

    fn merge_response(&self, follower: &AgentState, ego: &AgentState, ego_accel: f64) -> Option<f64> {
        if ego.x <= follower.x {
            return None;
        }
        let weight = self.lateral_weight(ego.y - follower.y);
        if weight <= 0.0 {
            return None;
        }
        let raw_gap = (ego.x - follower.x - self.vehicle_length).max(self.min_raw_gap);
        let effective_gap = raw_gap / weight.max(self.weight_floor);
        let ego_speed = ego.v + ego_accel * self.anticipation_time;
        Some(idm_accel(
            &self.idm,
            follower.v,
            effective_gap,
            follower.v - ego_speed,
        ))
    }
}

/// Follower acceleration reacting to both the Leader and a merging ego.
///
/// The leader is assumed to keep its speed, so its acceleration does not
/// enter the closing-speed term.
pub fn mr_idm_accel(
    config: &MergeReactiveConfig,
    follower: &AgentState,
    ego: &AgentState,
    leader: &AgentState,
    ego_accel: f64,
) -> f64 {
    let leader_gap = leader.x - follower.x - config.vehicle_length;
    let leader_response = idm_accel(&config.idm, follower.v, leader_gap, follower.v - leader.v);
    match config.merge_response(follower, ego, ego_accel) {
        Some(merge) => leader_response.min(merge),
        None => leader_response,
    }
}

/// Closed-loop Follower input. The Follower keeps its lane, so the steering
/// rate is always zero; braking never drives its speed below zero within `dt`.
pub fn follower_step(
    config: &MergeReactiveConfig,
    follower: &AgentState,
    ego: &AgentState,
    leader: &AgentState,
    ego_accel: f64,
    dt: f64,
) -> AgentInput {
    let mut accel = mr_idm_accel(config, follower, ego, leader, ego_accel);
    if dt > 0.0 && follower.v + accel * dt < 0.0 {
        accel = -follower.v / dt;
    }
    AgentInput::new(accel, 0.0)
}

/// Constant-speed Leader policy.
pub fn leader_step() -> AgentInput {
    AgentInput::new(0.0, 0.0)
}
