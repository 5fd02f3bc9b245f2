//! Scenario configuration file.
//!
//! A single JSON document holds every tunable of the scenario. Values are SI;
//! angles are given in degrees in fields ending in `_deg` and converted on
//! load. Missing fields take their defaults, unknown fields are rejected, and
//! every error names the file and line it refers to.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::driver::{IdmParams, MergeReactiveConfig};
use crate::error::{Error, Result};
use crate::features;
use crate::gp::KernelParams;
use crate::planner::{CollisionEllipse, EgoBounds, MergeLaneGeometry, PlannerConfig, PlannerWeights};
use crate::sim::{ScenarioConfig, TrialGrid};
use crate::solver::SolverOptions;
use crate::vehicle::{AgentState, VehicleGeometry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateEntry {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    #[serde(default)]
    pub psi_deg: f64,
    #[serde(default)]
    pub delta_deg: f64,
}

impl StateEntry {
    fn from_state(s: &AgentState) -> Self {
        Self {
            x: s.x,
            y: s.y,
            v: s.v,
            psi_deg: degrees(s.psi),
            delta_deg: degrees(s.delta),
        }
    }

    fn to_state(&self) -> AgentState {
        AgentState::new(self.x, self.y, self.v, self.psi_deg.to_radians(), self.delta_deg.to_radians())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub steps: usize,
    pub merge_hold_steps: usize,
    pub ego: StateEntry,
    pub follower: StateEntry,
    pub leader: StateEntry,
    pub grid: TrialGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsSection {
    pub q: [f64; 5],
    pub r: [f64; 2],
    pub s: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsSection {
    pub v_max: f64,
    pub psi_max_deg: f64,
    pub delta_max_deg: f64,
    pub accel_max: f64,
    pub steer_rate_max_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerSection {
    pub horizon: usize,
    pub sample_time: f64,
    pub reference_speed: f64,
    pub cv_velocity_variance: f64,
    pub weights: WeightsSection,
    pub ellipse: CollisionEllipse,
    pub bounds: BoundsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdmSection {
    pub desired_speed: f64,
    pub time_headway: f64,
    pub max_accel: f64,
    pub comfortable_decel: f64,
    pub min_gap: f64,
    pub accel_exponent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriverSection {
    pub idm: IdmSection,
    pub lane_width: f64,
    pub vehicle_length: f64,
    pub anticipation_time: f64,
    pub min_raw_gap: f64,
    pub weight_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpSection {
    pub prior_variance: f64,
    /// One per feature: ego speed, follower speed, leader speed,
    /// follower-ego gap, follower-leader gap, follower-ego lateral offset.
    pub length_scales: Vec<f64>,
    pub noise_variance: f64,
    pub inducing_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub penalty: f64,
    pub warm_start: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    /// Relative paths are resolved against the directory of the config file.
    pub fixture: PathBuf,
    pub samples: usize,
    pub ego_x: f64,
}

/// On-disk layout of the scenario configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub seed: u64,
    pub scenario: ScenarioSection,
    pub planner: PlannerSection,
    pub road: MergeLaneGeometry,
    pub vehicle: VehicleGeometry,
    pub follower_driver: DriverSection,
    pub gp: GpSection,
    pub solver: SolverSection,
    pub pretrain: PretrainSection,
}

/// Radians to degrees, rounded to 1e-9 deg so defaults print cleanly.
fn degrees(rad: f64) -> f64 {
    (rad.to_degrees() * 1e9).round() / 1e9
}

pub const DEFAULT_FIXTURE: &str = "fixtures/pretrain_x0_-85.csv";

/// A loaded scenario together with the resolved pre-training fixture path.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub scenario: ScenarioConfig,
    pub pretrain_fixture: PathBuf,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self::from_scenario(&ScenarioConfig::default(), Path::new(DEFAULT_FIXTURE))
    }
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ConfigFile::default().scenario
    }
}
impl Default for WeightsSection {
    fn default() -> Self {
        ConfigFile::default().planner.weights
    }
}
impl Default for BoundsSection {
    fn default() -> Self {
        ConfigFile::default().planner.bounds
    }
}
impl Default for PlannerSection {
    fn default() -> Self {
        ConfigFile::default().planner
    }
}
impl Default for IdmSection {
    fn default() -> Self {
        ConfigFile::default().follower_driver.idm
    }
}
impl Default for DriverSection {
    fn default() -> Self {
        ConfigFile::default().follower_driver
    }
}
impl Default for GpSection {
    fn default() -> Self {
        ConfigFile::default().gp
    }
}
impl Default for SolverSection {
    fn default() -> Self {
        ConfigFile::default().solver
    }
}
impl Default for PretrainSection {
    fn default() -> Self {
        ConfigFile::default().pretrain
    }
}

impl ConfigFile {
    pub fn from_scenario(c: &ScenarioConfig, fixture: &Path) -> Self {
        let p = &c.planner;
        let w = &p.weights;
        let d = &c.follower_driver;
        Self {
            seed: c.seed,
            scenario: ScenarioSection {
                steps: c.steps,
                merge_hold_steps: c.merge_hold_steps,
                ego: StateEntry::from_state(&c.ego),
                follower: StateEntry::from_state(&c.follower),
                leader: StateEntry::from_state(&c.leader),
                grid: c.grid,
            },
            planner: PlannerSection {
                horizon: p.horizon,
                sample_time: p.sample_time,
                reference_speed: p.reference_speed,
                cv_velocity_variance: p.cv_velocity_variance,
                weights: WeightsSection {
                    q: std::array::from_fn(|i| w.q[(i, i)]),
                    r: [w.r[(0, 0)], w.r[(1, 1)]],
                    s: [w.s[(0, 0)], w.s[(1, 1)]],
                },
                ellipse: p.ellipse,
                bounds: BoundsSection {
                    v_max: p.bounds.v_max,
                    psi_max_deg: degrees(p.bounds.psi_max),
                    delta_max_deg: degrees(p.bounds.delta_max),
                    accel_max: p.bounds.accel_max,
                    steer_rate_max_deg: degrees(p.bounds.steer_rate_max),
                },
            },
            road: p.geometry,
            vehicle: p.vehicle,
            follower_driver: DriverSection {
                idm: IdmSection {
                    desired_speed: d.idm.desired_speed,
                    time_headway: d.idm.time_headway,
                    max_accel: d.idm.max_accel,
                    comfortable_decel: d.idm.comfortable_decel,
                    min_gap: d.idm.min_gap,
                    accel_exponent: d.idm.accel_exponent,
                },
                lane_width: d.lane_width,
                vehicle_length: d.vehicle_length,
                anticipation_time: d.anticipation_time,
                min_raw_gap: d.min_raw_gap,
                weight_floor: d.weight_floor,
            },
            gp: GpSection {
                prior_variance: c.kernel.prior_variance,
                length_scales: c.kernel.length_scales.iter().copied().collect(),
                noise_variance: c.kernel.noise_variance,
                inducing_points: c.inducing_points,
            },
            solver: SolverSection {
                tolerance: c.solver.tolerance,
                max_iterations: c.solver.max_iterations,
                penalty: p.penalty,
                warm_start: c.warm_start,
            },
            pretrain: PretrainSection {
                fixture: fixture.to_path_buf(),
                samples: c.pretrain_samples,
                ego_x: c.pretrain_ego_x,
            },
        }
    }

    /// Converts to the in-memory scenario. Errors name the offending field.
    pub fn to_scenario(&self) -> std::result::Result<ScenarioConfig, (String, String)> {
        let fail = |field: &str, msg: String| Err((field.to_string(), msg));
        let pl = &self.planner;
        let b = &pl.bounds;
        let w = &pl.weights;
        let planner = PlannerConfig {
            horizon: pl.horizon,
            sample_time: pl.sample_time,
            reference_speed: pl.reference_speed,
            geometry: self.road,
            vehicle: self.vehicle,
            weights: PlannerWeights::from_diagonals(w.q, w.r, w.s),
            ellipse: pl.ellipse,
            bounds: EgoBounds {
                v_max: b.v_max,
                psi_max: b.psi_max_deg.to_radians(),
                delta_max: b.delta_max_deg.to_radians(),
                accel_max: b.accel_max,
                steer_rate_max: b.steer_rate_max_deg.to_radians(),
            },
            penalty: self.solver.penalty,
            cv_velocity_variance: pl.cv_velocity_variance,
        };
        if pl.horizon == 0 {
            return fail("horizon", "must be at least 1".into());
        }
        if !(pl.sample_time > 0.0 && pl.sample_time.is_finite()) {
            return fail("sample_time", format!("must be positive, got {}", pl.sample_time));
        }
        if !(self.solver.penalty > 0.0) {
            return fail("penalty", "must be positive".into());
        }
        if !(self.solver.tolerance > 0.0) {
            return fail("tolerance", "must be positive".into());
        }
        if self.solver.max_iterations == 0 {
            return fail("max_iterations", "must be at least 1".into());
        }
        if let Err(e) = self.road.validate() {
            return fail("road", e.to_string());
        }
        if let Err(e) = self.vehicle.validate() {
            return fail("vehicle", e.to_string());
        }
        if let Err(e) = planner.weights.validate() {
            return fail("weights", e.to_string());
        }
        if let Err(e) = planner.validate() {
            return fail("planner", e.to_string());
        }
        let d = &self.follower_driver;
        let driver = MergeReactiveConfig {
            idm: IdmParams {
                desired_speed: d.idm.desired_speed,
                time_headway: d.idm.time_headway,
                max_accel: d.idm.max_accel,
                comfortable_decel: d.idm.comfortable_decel,
                min_gap: d.idm.min_gap,
                accel_exponent: d.idm.accel_exponent,
            },
            lane_width: d.lane_width,
            vehicle_length: d.vehicle_length,
            anticipation_time: d.anticipation_time,
            min_raw_gap: d.min_raw_gap,
            weight_floor: d.weight_floor,
        };
        if let Err(e) = driver.validate() {
            return fail("follower_driver", e.to_string());
        }
        let kernel = KernelParams {
            prior_variance: self.gp.prior_variance,
            length_scales: DVector::from_vec(self.gp.length_scales.clone()),
            noise_variance: self.gp.noise_variance,
            feature_map: features::merge_feature_map(),
        };
        if let Err(e) = kernel.validate() {
            return fail("length_scales", e.to_string());
        }
        if self.gp.inducing_points == 0 {
            return fail("inducing_points", "must be at least 1".into());
        }
        if self.scenario.grid.count == 0 {
            return fail("count", "trial grid must not be empty".into());
        }
        if self.scenario.merge_hold_steps == 0 {
            return fail("merge_hold_steps", "must be at least 1".into());
        }
        let sc = &self.scenario;
        for (name, s) in [("ego", &sc.ego), ("follower", &sc.follower), ("leader", &sc.leader)] {
            let st = s.to_state();
            if !st.is_finite() || st.v < 0.0 {
                return fail(name, "initial state must be finite with non-negative speed".into());
            }
        }
        Ok(ScenarioConfig {
            planner,
            follower_driver: driver,
            ego: sc.ego.to_state(),
            follower: sc.follower.to_state(),
            leader: sc.leader.to_state(),
            steps: sc.steps,
            grid: sc.grid,
            kernel,
            inducing_points: self.gp.inducing_points,
            solver: SolverOptions {
                tolerance: self.solver.tolerance,
                max_iterations: self.solver.max_iterations,
            },
            warm_start: self.solver.warm_start,
            merge_hold_steps: sc.merge_hold_steps,
            pretrain_samples: self.pretrain.samples,
            pretrain_ego_x: self.pretrain.ego_x,
            seed: self.seed,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// 1-based line of the first `"field"` key in `text`.
fn key_line(text: &str, field: &str) -> Option<usize> {
    let needle = format!("\"{field}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

/// Parses a configuration document. `origin` labels error messages.
pub fn parse_config(text: &str, origin: &str) -> Result<ConfigFile> {
    serde_json::from_str(text).map_err(|e| {
        Error::Config(format!("{origin}:{}:{}: {e}", e.line(), e.column()))
    })
}

pub fn scenario_from_str(text: &str, origin: &str) -> Result<ScenarioConfig> {
    let file = parse_config(text, origin)?;
    file.to_scenario().map_err(|(field, msg)| {
        let line = key_line(text, &field).unwrap_or(1);
        Error::Config(format!("{origin}:{line}: {field}: {msg}"))
    })
}

/// Loads a configuration file; `None` gives the built-in defaults with the
/// fixture path relative to the working directory.
pub fn load(path: Option<&Path>) -> Result<LoadedConfig> {
    let Some(path) = path else {
        return Ok(LoadedConfig {
            scenario: ScenarioConfig::default(),
            pretrain_fixture: PathBuf::from(DEFAULT_FIXTURE),
        });
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let origin = path.display().to_string();
    let file = parse_config(&text, &origin)?;
    let scenario = scenario_from_str(&text, &origin)?;
    let fixture = if file.pretrain.fixture.is_absolute() {
        file.pretrain.fixture.clone()
    } else {
        path.parent().unwrap_or(Path::new(".")).join(&file.pretrain.fixture)
    };
    Ok(LoadedConfig { scenario, pretrain_fixture: fixture })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let text = ConfigFile::default().to_json();
        let back = scenario_from_str(&text, "mem").unwrap();
        let d = ScenarioConfig::default();
        assert_eq!(back.planner.horizon, d.planner.horizon);
        assert_eq!(back.grid, d.grid);
        assert!((back.planner.bounds.psi_max - d.planner.bounds.psi_max).abs() < 1e-15);
        assert_eq!(back.kernel, d.kernel);
    }

    #[test]
    fn empty_object_is_default() {
        let s = scenario_from_str("{}", "mem").unwrap();
        assert_eq!(s.steps, 80);
        assert_eq!(s.planner.penalty, 1e4);
    }

    #[test]
    fn partial_nested_sections() {
        let s = scenario_from_str(r#"{"road": {"lane_width": 4.0}, "scenario": {"grid": {"count": 3}}}"#, "mem").unwrap();
        assert_eq!(s.planner.geometry.lane_width, 4.0);
        assert_eq!(s.planner.geometry.merge_start, 20.0);
        assert_eq!(s.grid.points(), vec![-100.0, -87.5, -75.0]);
    }

    #[test]
    fn degrees_are_converted() {
        let s = scenario_from_str(r#"{"planner": {"bounds": {"psi_max_deg": 90.0}}}"#, "mem").unwrap();
        assert!((s.planner.bounds.psi_max - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn unknown_field_names_line() {
        let text = "{\n  \"planner\": {\n    \"horizn\": 3\n  }\n}";
        let e = scenario_from_str(text, "cfg.json").unwrap_err().to_string();
        assert!(e.contains("cfg.json:3:"), "{e}");
        assert!(e.contains("horizn"), "{e}");
    }

    #[test]
    fn invalid_value_names_line() {
        let text = "{\n  \"planner\": {\n    \"horizon\": 12,\n    \"sample_time\": -1.0\n  }\n}";
        let e = scenario_from_str(text, "cfg.json").unwrap_err().to_string();
        assert!(e.contains("cfg.json:4:"), "{e}");
        assert!(e.contains("sample_time"), "{e}");
    }
}
