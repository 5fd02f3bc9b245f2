//! Closed-loop simulation of the three-vehicle merge and Monte Carlo batches.

use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::ResidualChannel;
use crate::driver::{follower_step, leader_step, MergeReactiveConfig};
use crate::error::{Error, Result};
use crate::features::{self, Z_DIM};
use crate::gp::{fit_sparse, KernelParams, TrainingSet};
use crate::planner::{
    assemble_cv_mpc, assemble_gp_mpc, centroid, first_input, select_inducing_points,
    shift_inputs, MergeOcp, PlannerConfig, Scene, SOFT_PER_STEP,
};
use crate::solver::{solve, SolveStatus, SolverOptions};
use crate::vehicle::{cv_matrix, idx, rk4_step, AgentInput, AgentState, VehicleGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Controller {
    Gp,
    Cv,
}

/// A controller together with its training-data policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ControllerSpec {
    pub controller: Controller,
    pub pretrained: bool,
}

impl ControllerSpec {
    pub const GP: Self = Self { controller: Controller::Gp, pretrained: false };
    pub const GP_PRETRAINED: Self = Self { controller: Controller::Gp, pretrained: true };
    pub const CV: Self = Self { controller: Controller::Cv, pretrained: false };

    pub fn label(&self) -> &'static str {
        match (self.controller, self.pretrained) {
            (Controller::Gp, false) => "gp",
            (Controller::Gp, true) => "gp-pretrained",
            (Controller::Cv, _) => "cv",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        match label {
            "gp" => Some(Self::GP),
            "gp-pretrained" => Some(Self::GP_PRETRAINED),
            "cv" => Some(Self::CV),
            _ => None,
        }
    }
}

/// Equidistant ego start positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialGrid {
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

impl Default for TrialGrid {
    fn default() -> Self {
        Self { start: -100.0, end: -75.0, count: 51 }
    }
}

impl TrialGrid {
    pub fn points(&self) -> Vec<f64> {
        match self.count {
            0 => Vec::new(),
            1 => vec![self.start],
            n => (0..n)
                .map(|i| self.start + (self.end - self.start) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub planner: PlannerConfig,
    pub follower_driver: MergeReactiveConfig,
    /// Ego start; its X is replaced by the grid value of each trial.
    pub ego: AgentState,
    pub follower: AgentState,
    pub leader: AgentState,
    pub steps: usize,
    pub grid: TrialGrid,
    pub kernel: KernelParams,
    pub inducing_points: usize,
    pub solver: SolverOptions,
    pub warm_start: bool,
    /// Consecutive in-lane steps required to declare a merge.
    pub merge_hold_steps: usize,
    pub pretrain_samples: usize,
    /// Ego start of the trial whose log seeds the pre-trained controller.
    pub pretrain_ego_x: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            planner: PlannerConfig::default(),
            follower_driver: MergeReactiveConfig::default(),
            ego: AgentState::new(-85.0, -3.5, 31.0, 0.0, 0.0),
            follower: AgentState::new(-75.0, 0.0, 31.0, 0.0, 0.0),
            leader: AgentState::new(0.0, 0.0, 25.0, 0.0, 0.0),
            steps: 80,
            grid: TrialGrid::default(),
            kernel: KernelParams::merge_default(),
            inducing_points: 4,
            solver: SolverOptions::default(),
            warm_start: true,
            merge_hold_steps: 4,
            pretrain_samples: 80,
            pretrain_ego_x: -85.0,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.planner.validate()?;
        self.follower_driver.validate()?;
        self.kernel.validate()?;
        if self.grid.count == 0 {
            return Err(Error::Config("trial grid must not be empty".into()));
        }
        if self.inducing_points == 0 || self.merge_hold_steps == 0 {
            return Err(Error::Config("inducing_points and merge_hold_steps must be positive".into()));
        }
        if self.kernel.input_dim() != Z_DIM {
            return Err(Error::Config(format!("kernel feature map must have {Z_DIM} columns")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Between,
    Behind,
    Failed,
}

impl Outcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::Between => "between",
            Outcome::Behind => "behind",
            Outcome::Failed => "failed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "between" => Some(Outcome::Between),
            "behind" => Some(Outcome::Behind),
            "failed" => Some(Outcome::Failed),
            _ => None,
        }
    }
}

/// One closed-loop step: the state at time k, what was planned and applied,
/// and the observed residual.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub time: f64,
    pub ego: AgentState,
    pub follower: AgentState,
    pub leader: AgentState,
    pub input: AgentInput,
    pub follower_accel: f64,
    /// Observed velocity increment of the Follower over the step.
    pub residual: f64,
    /// Training-set size used to fit the GP at this step.
    pub data_size: usize,
    pub solve_ms: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    /// The solver result was not used and the shifted previous plan was applied.
    pub fallback: bool,
    pub pred_v: Vec<f64>,
    pub pred_x: Vec<f64>,
    pub pred_sigma_x: Vec<f64>,
    pub hc_follower: Vec<f64>,
    pub hc_leader: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub label: String,
    pub trial: usize,
    pub ego_start_x: f64,
    pub steps: Vec<StepRecord>,
    /// Joint state after the last step.
    pub terminal: (AgentState, AgentState, AgentState),
    pub outcome: Outcome,
    /// First step of the sustained in-lane window, if the ego merged.
    pub merge_step: Option<usize>,
    pub collision: bool,
    /// `(z_k, y_k)` pairs gathered online.
    pub samples: Vec<(DVector<f64>, f64)>,
}

impl TrialRecord {
    /// Realized Follower velocity at time `t`.
    pub fn follower_velocity(&self, t: usize) -> Option<f64> {
        if t < self.steps.len() {
            Some(self.steps[t].follower.v)
        } else if t == self.steps.len() {
            Some(self.terminal.1.v)
        } else {
            None
        }
    }
}

/// Mean absolute error between the velocity prediction made at step `k` and
/// the realized velocities. Near the end of the trial only the available
/// part of the horizon is used; `None` when nothing is available.
pub fn prediction_error(record: &TrialRecord, k: usize) -> Option<f64> {
    let step = record.steps.get(k)?;
    let mut sum = 0.0;
    let mut count = 0;
    for (i, v) in step.pred_v.iter().enumerate() {
        match record.follower_velocity(k + i + 1) {
            Some(real) => {
                sum += (v - real).abs();
                count += 1;
            }
            None => break,
        }
    }
    (count > 0).then(|| sum / count as f64)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Per-step errors over the whole trial.
pub fn trial_errors(record: &TrialRecord) -> Vec<f64> {
    (0..record.steps.len()).filter_map(|k| prediction_error(record, k)).collect()
}

/// Per-step errors before the merge (all steps if no merge).
pub fn trial_pre_merge_errors(record: &TrialRecord) -> Vec<f64> {
    let end = record.merge_step.unwrap_or(record.steps.len()).min(record.steps.len());
    (0..end).filter_map(|k| prediction_error(record, k)).collect()
}

pub fn trial_mean_error(record: &TrialRecord) -> Option<f64> {
    mean(trial_errors(record).into_iter())
}

pub fn trial_pre_merge_error(record: &TrialRecord) -> Option<f64> {
    mean(trial_pre_merge_errors(record).into_iter())
}

fn corners(state: &AgentState, geom: &VehicleGeometry) -> [(f64, f64); 4] {
    let (cx, cy) = centroid(&state.to_vector(), geom.length);
    let (s, c) = state.psi.sin_cos();
    let (hl, hw) = (geom.length / 2.0, geom.width / 2.0);
    [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)].map(|(a, b)| (cx + a * c - b * s, cy + a * s + b * c))
}

/// Separating-axis test on the two vehicle rectangles.
pub fn rectangles_overlap(a: &AgentState, b: &AgentState, geom: &VehicleGeometry) -> bool {
    let ca = corners(a, geom);
    let cb = corners(b, geom);
    let axes = [a.psi, a.psi + std::f64::consts::FRAC_PI_2, b.psi, b.psi + std::f64::consts::FRAC_PI_2];
    for th in axes {
        let (s, c) = th.sin_cos();
        let proj = |p: &(f64, f64)| p.0 * c + p.1 * s;
        let (amin, amax) = ca.iter().map(proj).fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let (bmin, bmax) = cb.iter().map(proj).fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if amax < bmin || bmax < amin {
            return false;
        }
    }
    true
}

fn ordering_outcome(ego: &AgentState, follower: &AgentState, leader: &AgentState) -> Outcome {
    if ego.x > follower.x && ego.x < leader.x {
        Outcome::Between
    } else if ego.x <= follower.x {
        Outcome::Behind
    } else {
        Outcome::Failed
    }
}

/// Runs one closed-loop trial from the given ego start position.
pub fn run_trial(
    config: &ScenarioConfig,
    spec: ControllerSpec,
    trial: usize,
    ego_start_x: f64,
    pretrain: Option<&TrainingSet>,
) -> Result<TrialRecord> {
    let pc = &config.planner;
    let dt = pc.sample_time;
    let n = pc.horizon;
    let geom = &pc.vehicle;
    let lane = &pc.geometry;
    let channel = ResidualChannel::velocity();
    let a_cv = cv_matrix(dt);

    let mut ego = config.ego;
    ego.x = ego_start_x;
    let mut follower = config.follower;
    let mut leader = config.leader;
    let mut prev_input = AgentInput::new(0.0, 0.0);
    let mut data = match (spec.controller, spec.pretrained) {
        (Controller::Gp, true) => pretrain
            .ok_or_else(|| Error::invalid("pre-trained controller requires a training set"))?
            .clone(),
        _ => TrainingSet::new(),
    };
    let mut prev_plan: Option<(DVector<f64>, Vec<DVector<f64>>)> = None;
    let mut steps = Vec::with_capacity(config.steps);
    let mut samples = Vec::with_capacity(config.steps);
    let mut in_lane = 0usize;
    let mut merge: Option<(usize, Outcome)> = None;
    let mut collision = false;

    for k in 0..config.steps {
        let scene = Scene { ego, follower, leader, prev_input };
        let gp_model;
        let ocp: MergeOcp = match spec.controller {
            Controller::Gp => {
                let inducing = match &prev_plan {
                    Some((_, z)) => select_inducing_points(z, config.inducing_points)?,
                    None => {
                        let z = features::assemble(
                            &ego.to_vector(),
                            &follower.to_vector(),
                            &leader.to_vector(),
                            &prev_input.to_vector(),
                        );
                        vec![z; config.inducing_points]
                    }
                };
                gp_model = fit_sparse(&config.kernel, &data, &inducing)?;
                assemble_gp_mpc(&scene, &gp_model, pc)?
            }
            Controller::Cv => assemble_cv_mpc(&scene, pc)?,
        };
        let warm = match (&prev_plan, config.warm_start) {
            (Some((u, _)), true) => shift_inputs(u),
            _ => DVector::zeros(2 * n),
        };
        let problem = ocp.problem(Some(&warm), false)?;
        let (plan, solve_ms, iterations, status, fallback) = match solve(&problem, &config.solver) {
            Ok(r) if r.status != SolveStatus::NumericalFailure => {
                (r.inputs, r.solve_time_s * 1e3, r.iterations, r.status, false)
            }
            Ok(r) => (problem.initial_inputs().clone(), r.solve_time_s * 1e3, r.iterations, r.status, true),
            Err(_) => (problem.initial_inputs().clone(), 0.0, 0, SolveStatus::NumericalFailure, true),
        };
        let pred = ocp.predict(&plan)?;
        let eval = crate::solver::OcpModel::evaluate(&ocp, &plan, false)?;
        let u0 = first_input(&plan);

        // true system
        let ego_next = rk4_step(&ego, &u0, geom, dt)?;
        let f_in = follower_step(&config.follower_driver, &follower, &ego, &leader, u0.accel, dt);
        let follower_next = rk4_step(&follower, &f_in, geom, dt)?;
        let leader_next = rk4_step(&leader, &leader_step(), geom, dt)?;

        let residual = channel.project(&(follower_next.to_vector() - a_cv * follower.to_vector()));
        let z = features::assemble(&ego.to_vector(), &follower.to_vector(), &leader.to_vector(), &u0.to_vector());

        steps.push(StepRecord {
            k,
            time: k as f64 * dt,
            ego,
            follower,
            leader,
            input: u0,
            follower_accel: f_in.accel,
            residual,
            data_size: data.len(),
            solve_ms,
            iterations,
            status,
            fallback,
            pred_v: (1..=n).map(|i| pred.follower_mean[i][idx::V]).collect(),
            pred_x: (1..=n).map(|i| pred.follower_mean[i][idx::X]).collect(),
            pred_sigma_x: (1..=n).map(|i| pred.follower_cov[i][(0, 0)].max(0.0).sqrt()).collect(),
            hc_follower: (0..n).map(|i| eval.soft[SOFT_PER_STEP * i]).collect(),
            hc_leader: (0..n).map(|i| eval.soft[SOFT_PER_STEP * i + 1]).collect(),
        });
        if spec.controller == Controller::Gp {
            data.push(z.clone(), residual);
        }
        samples.push((z, residual));

        ego = ego_next;
        follower = follower_next;
        leader = leader_next;
        prev_input = u0;
        prev_plan = Some((plan, pred.features));

        if rectangles_overlap(&ego, &follower, geom) || rectangles_overlap(&ego, &leader, geom) {
            collision = true;
            break;
        }
        if merge.is_none() {
            if (ego.y - lane.target_center).abs() < lane.lane_width / 4.0 {
                in_lane += 1;
            } else {
                in_lane = 0;
            }
            if in_lane >= config.merge_hold_steps {
                let start = k + 2 - in_lane;
                merge = Some((start, ordering_outcome(&ego, &follower, &leader)));
            }
        }
    }

    let outcome = match (collision, merge) {
        (true, _) | (false, None) => Outcome::Failed,
        (false, Some((_, o))) => o,
    };
    Ok(TrialRecord {
        label: spec.label().to_string(),
        trial,
        ego_start_x,
        steps,
        terminal: (ego, follower, leader),
        outcome,
        merge_step: merge.map(|(s, _)| s),
        collision,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub controller: String,
    pub trials: usize,
    pub success: usize,
    pub behind: usize,
    pub failed: usize,
    pub mean_abs_err: f64,
    pub mean_abs_err_pre_merge: f64,
    pub mean_solve_ms: f64,
    pub pct_realtime: f64,
    pub solver_fallbacks: usize,
}

pub fn summarize(label: &str, records: &[&TrialRecord], sample_time: f64) -> BatchSummary {
    let count = |o: Outcome| records.iter().filter(|r| r.outcome == o).count();
    let times: Vec<f64> = records.iter().flat_map(|r| r.steps.iter().map(|s| s.solve_ms)).collect();
    let realtime = times.iter().filter(|t| **t < sample_time * 1e3).count();
    BatchSummary {
        controller: label.to_string(),
        trials: records.len(),
        success: count(Outcome::Between),
        behind: count(Outcome::Behind),
        failed: count(Outcome::Failed),
        mean_abs_err: mean(records.iter().flat_map(|r| trial_errors(r))).unwrap_or(f64::NAN),
        mean_abs_err_pre_merge: mean(records.iter().flat_map(|r| trial_pre_merge_errors(r)))
            .unwrap_or(f64::NAN),
        mean_solve_ms: mean(times.iter().copied()).unwrap_or(0.0),
        pct_realtime: if times.is_empty() { 0.0 } else { 100.0 * realtime as f64 / times.len() as f64 },
        solver_fallbacks: records.iter().map(|r| r.steps.iter().filter(|s| s.fallback).count()).sum(),
    }
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub summaries: Vec<BatchSummary>,
    pub records: Vec<TrialRecord>,
}

/// Runs every controller over the trial grid, `jobs` trials at a time.
pub fn run_batch(
    config: &ScenarioConfig,
    specs: &[ControllerSpec],
    pretrain: Option<&TrainingSet>,
    jobs: usize,
) -> Result<BatchResult> {
    config.validate()?;
    let grid = config.grid.points();
    let tasks: Vec<(ControllerSpec, usize, f64)> = specs
        .iter()
        .flat_map(|s| grid.iter().enumerate().map(move |(i, x)| (*s, i, *x)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let records: Vec<TrialRecord> = pool.install(|| {
        tasks
            .par_iter()
            .map(|(s, i, x)| run_trial(config, *s, *i, *x, pretrain))
            .collect::<Result<Vec<_>>>()
    })?;
    let summaries = specs
        .iter()
        .map(|s| {
            let mine: Vec<&TrialRecord> = records.iter().filter(|r| r.label == s.label()).collect();
            summarize(s.label(), &mine, config.planner.sample_time)
        })
        .collect();
    Ok(BatchResult { summaries, records })
}

/// Training set taken from the first samples of an online GP-MPC trial.
pub fn pretrain_set(config: &ScenarioConfig) -> Result<TrainingSet> {
    let rec = run_trial(config, ControllerSpec::GP, 0, config.pretrain_ego_x, None)?;
    let take = config.pretrain_samples.min(rec.samples.len());
    let (z, y): (Vec<_>, Vec<_>) = rec.samples.into_iter().take(take).unzip();
    TrainingSet::from_pairs(z, y)
}

pub fn write_training_csv(path: &Path, set: &TrainingSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..Z_DIM).map(|i| format!("z{i}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for (z, y) in set.inputs().iter().zip(set.outputs()) {
        let mut row: Vec<String> = z.iter().map(|v| v.to_string()).collect();
        row.push(y.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_training_csv(path: &Path) -> Result<TrainingSet> {
    if !path.exists() {
        return Err(Error::MissingFixture(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != Z_DIM + 1 {
            return Err(Error::Config(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                line + 2,
                rec.len(),
                Z_DIM + 1
            )));
        }
        let vals: std::result::Result<Vec<f64>, _> = rec.iter().map(|s| s.parse::<f64>()).collect();
        let vals = vals.map_err(|e| Error::Config(format!("{}: row {}: {e}", path.display(), line + 2)))?;
        inputs.push(DVector::from_column_slice(&vals[..Z_DIM]));
        outputs.push(vals[Z_DIM]);
    }
    TrainingSet::from_pairs(inputs, outputs)
}
