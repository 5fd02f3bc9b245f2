//! Python bindings: thin wrappers over the `gpmpc` crate.

use std::path::PathBuf;

use gpmpc::config;
use gpmpc::driver::{idm_accel as idm, IdmParams};
use gpmpc::error::Error;
use gpmpc::gp::{fit, KernelParams, Posterior, TrainingSet};
use gpmpc::planner::{tightened_ellipse_offsets, CollisionEllipse};
use gpmpc::sim::{self, ControllerSpec};
use gpmpc::vehicle::{rk4_step_vec, InputVec, StateVec};
use nalgebra::DVector;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::MissingFixture(_) | Error::InvalidArgument(_) | Error::Domain(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn spec(label: &str) -> PyResult<ControllerSpec> {
    ControllerSpec::from_label(label)
        .ok_or_else(|| PyValueError::new_err(format!("unknown controller `{label}` (gp, cv, gp-pretrained)")))
}

/// Runs the fast invariant checks; returns `(name, passed, detail)` tuples.
#[pyfunction]
fn selftest() -> Vec<(String, bool, String)> {
    gpmpc::selftest::run_all().into_iter().map(|c| (c.name.to_string(), c.passed, c.detail)).collect()
}

/// Exact GP posterior `(mean, variance)` with the merge kernel.
#[pyfunction]
fn gp_posterior(inputs: Vec<Vec<f64>>, outputs: Vec<f64>, query: Vec<f64>) -> PyResult<(f64, f64)> {
    let z: Vec<DVector<f64>> = inputs.into_iter().map(DVector::from_vec).collect();
    let set = TrainingSet::from_pairs(z, outputs).map_err(err)?;
    let model = fit(&KernelParams::merge_default(), &set).map_err(err)?;
    let p = model.posterior(&DVector::from_vec(query)).map_err(err)?;
    Ok((p.mean, p.variance))
}

/// One RK4 step of the kinematic bicycle `(x, y, v, psi, delta)`.
#[pyfunction]
fn rk4_step(state: [f64; 5], input: [f64; 2], wheelbase: f64, dt: f64) -> PyResult<[f64; 5]> {
    let x = rk4_step_vec(&StateVec::from(state), &InputVec::from(input), wheelbase, dt).map_err(err)?;
    Ok(x.into())
}

/// IDM acceleration with the default Follower parameters.
#[pyfunction]
fn idm_accel(v: f64, gap: f64, closing_speed: f64) -> f64 {
    idm(&IdmParams::default(), v, gap, closing_speed)
}

/// Chance-tightened collision ellipse in centroid offsets; feasible when `<= 0`.
#[pyfunction]
#[pyo3(signature = (dx, dy, sigma_xx, semi_major=6.5, semi_minor=2.2, sigma=2.0))]
fn tightened_ellipse(dx: f64, dy: f64, sigma_xx: f64, semi_major: f64, semi_minor: f64, sigma: f64) -> f64 {
    tightened_ellipse_offsets(dx, dy, sigma_xx, &CollisionEllipse { semi_major, semi_minor, sigma })
}

fn load(config: Option<PathBuf>) -> PyResult<config::LoadedConfig> {
    config::load(config.as_deref()).map_err(err)
}

/// Runs one closed-loop trial and returns its log as a dict of lists.
#[pyfunction]
#[pyo3(signature = (controller="gp", ego_start_x=-85.0, config=None, steps=None))]
fn run_trial<'py>(
    py: Python<'py>,
    controller: &str,
    ego_start_x: f64,
    config: Option<PathBuf>,
    steps: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = spec(controller)?;
    let loaded = load(config)?;
    let mut scenario = loaded.scenario;
    if let Some(n) = steps {
        scenario.steps = n;
    }
    let data = if spec.pretrained {
        Some(sim::read_training_csv(&loaded.pretrain_fixture).map_err(err)?)
    } else {
        None
    };
    let rec = py
        .detach(|| sim::run_trial(&scenario, spec, 0, ego_start_x, data.as_ref()))
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("controller", &rec.label)?;
    d.set_item("outcome", rec.outcome.as_str())?;
    d.set_item("merge_step", rec.merge_step)?;
    d.set_item("collision", rec.collision)?;
    let col = |f: fn(&sim::StepRecord) -> f64| rec.steps.iter().map(f).collect::<Vec<f64>>();
    d.set_item("time", col(|s| s.time))?;
    d.set_item("ego_x", col(|s| s.ego.x))?;
    d.set_item("ego_y", col(|s| s.ego.y))?;
    d.set_item("follower_x", col(|s| s.follower.x))?;
    d.set_item("follower_v", col(|s| s.follower.v))?;
    d.set_item("leader_x", col(|s| s.leader.x))?;
    d.set_item("accel", col(|s| s.input.accel))?;
    d.set_item("steer_rate", col(|s| s.input.steer_rate))?;
    d.set_item("solve_ms", col(|s| s.solve_ms))?;
    let errors: Vec<Option<f64>> = (0..rec.steps.len()).map(|k| sim::prediction_error(&rec, k)).collect();
    d.set_item("prediction_error", errors)?;
    Ok(d)
}

/// Runs the trial grid and returns `{controller: summary}`.
#[pyfunction]
#[pyo3(signature = (controllers=vec!["gp".to_string(), "cv".to_string()], config=None, trials=None, steps=None, jobs=1))]
fn run_batch<'py>(
    py: Python<'py>,
    controllers: Vec<String>,
    config: Option<PathBuf>,
    trials: Option<usize>,
    steps: Option<usize>,
    jobs: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let specs = controllers.iter().map(|c| spec(c)).collect::<PyResult<Vec<_>>>()?;
    let loaded = load(config)?;
    let mut scenario = loaded.scenario;
    if let Some(n) = trials {
        scenario.grid.count = n;
    }
    if let Some(n) = steps {
        scenario.steps = n;
    }
    let data = if specs.iter().any(|s| s.pretrained) {
        Some(sim::read_training_csv(&loaded.pretrain_fixture).map_err(err)?)
    } else {
        None
    };
    let out = py
        .detach(|| sim::run_batch(&scenario, &specs, data.as_ref(), jobs))
        .map_err(err)?;
    let d = PyDict::new(py);
    for b in &out.summaries {
        let row = PyDict::new(py);
        row.set_item("trials", b.trials)?;
        row.set_item("success", b.success)?;
        row.set_item("behind", b.behind)?;
        row.set_item("failed", b.failed)?;
        row.set_item("mean_abs_err", b.mean_abs_err)?;
        row.set_item("mean_abs_err_pre_merge", b.mean_abs_err_pre_merge)?;
        row.set_item("mean_solve_ms", b.mean_solve_ms)?;
        row.set_item("pct_realtime", b.pct_realtime)?;
        d.set_item(&b.controller, row)?;
    }
    Ok(d)
}

#[pymodule]
#[pyo3(name = "gpmpc")]
fn gpmpc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    m.add_function(wrap_pyfunction!(gp_posterior, m)?)?;
    m.add_function(wrap_pyfunction!(rk4_step, m)?)?;
    m.add_function(wrap_pyfunction!(idm_accel, m)?)?;
    m.add_function(wrap_pyfunction!(tightened_ellipse, m)?)?;
    m.add_function(wrap_pyfunction!(run_trial, m)?)?;
    m.add_function(wrap_pyfunction!(run_batch, m)?)?;
    Ok(())
}
