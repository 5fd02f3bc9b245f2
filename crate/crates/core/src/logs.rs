//! Trial logs, batch summaries and plot-ready tables.
//!
//! A trial CSV has one row per closed-loop step followed by one terminal row
//! holding the joint state after the last step (its input and solver columns
//! are empty). Trial-level fields (`label`, `trial`, `ego_start_x`,
//! `outcome`, `merge_step`, `collision`) repeat on every row. Per-horizon
//! columns are suffixed `_1 .. _N`. Floats are written in shortest
//! round-trip form so reading a log back reproduces the record exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features;
use crate::sim::{prediction_error, BatchSummary, Outcome, StepRecord, TrialRecord};
use crate::solver::SolveStatus;
use crate::vehicle::{AgentInput, AgentState};

const AGENTS: [&str; 3] = ["ego", "follower", "leader"];
const STATE_FIELDS: [&str; 5] = ["x", "y", "v", "psi", "delta"];
const HORIZON_FIELDS: [&str; 5] = ["pred_v", "pred_x", "pred_sigma_x", "hc_follower", "hc_leader"];

fn header(horizon: usize) -> Vec<String> {
    let mut h: Vec<String> = ["label", "trial", "ego_start_x", "outcome", "merge_step", "collision", "k", "time"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for a in AGENTS {
        for f in STATE_FIELDS {
            h.push(format!("{a}_{f}"));
        }
    }
    for f in [
        "accel",
        "steer_rate",
        "follower_accel",
        "residual",
        "data_size",
        "solve_ms",
        "iterations",
        "status",
        "fallback",
    ] {
        h.push(f.to_string());
    }
    for f in HORIZON_FIELDS {
        for i in 1..=horizon {
            h.push(format!("{f}_{i}"));
        }
    }
    h
}

fn status_str(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Converged => "converged",
        SolveStatus::MaxIter => "max-iter",
        SolveStatus::NumericalFailure => "numerical-failure",
    }
}

fn parse_status(s: &str) -> Option<SolveStatus> {
    match s {
        "converged" => Some(SolveStatus::Converged),
        "max-iter" => Some(SolveStatus::MaxIter),
        "numerical-failure" => Some(SolveStatus::NumericalFailure),
        _ => None,
    }
}

fn horizon_of(record: &TrialRecord) -> usize {
    record.steps.first().map_or(0, |s| s.pred_v.len())
}

pub fn write_trial_csv(path: &Path, record: &TrialRecord) -> Result<()> {
    let n = horizon_of(record);
    if record.steps.iter().any(|s| {
        [&s.pred_v, &s.pred_x, &s.pred_sigma_x, &s.hc_follower, &s.hc_leader]
            .iter()
            .any(|v| v.len() != n)
    }) {
        return Err(Error::invalid("per-step horizon vectors have inconsistent lengths"));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header(n))?;
    let trial_cols = |k: usize, time: f64| -> Vec<String> {
        vec![
            record.label.clone(),
            record.trial.to_string(),
            record.ego_start_x.to_string(),
            record.outcome.as_str().to_string(),
            record.merge_step.map(|m| m.to_string()).unwrap_or_default(),
            record.collision.to_string(),
            k.to_string(),
            time.to_string(),
        ]
    };
    let states = |row: &mut Vec<String>, agents: [&AgentState; 3]| {
        for a in agents {
            for v in [a.x, a.y, a.v, a.psi, a.delta] {
                row.push(v.to_string());
            }
        }
    };
    for s in &record.steps {
        let mut row = trial_cols(s.k, s.time);
        states(&mut row, [&s.ego, &s.follower, &s.leader]);
        row.extend([
            s.input.accel.to_string(),
            s.input.steer_rate.to_string(),
            s.follower_accel.to_string(),
            s.residual.to_string(),
            s.data_size.to_string(),
            s.solve_ms.to_string(),
            s.iterations.to_string(),
            status_str(s.status).to_string(),
            s.fallback.to_string(),
        ]);
        for v in [&s.pred_v, &s.pred_x, &s.pred_sigma_x, &s.hc_follower, &s.hc_leader] {
            row.extend(v.iter().map(|x| x.to_string()));
        }
        w.write_record(&row)?;
    }
    let k_end = record.steps.len();
    let dt = match record.steps.as_slice() {
        [.., a, b] => b.time - a.time,
        _ => 0.0,
    };
    let t_end = record.steps.last().map_or(0.0, |s| s.time + dt);
    let mut row = trial_cols(k_end, t_end);
    let (e, f, l) = &record.terminal;
    states(&mut row, [e, f, l]);
    row.extend(std::iter::repeat_n(String::new(), 9 + 5 * n));
    w.write_record(&row)?;
    w.flush()?;
    Ok(())
}

struct Row<'a> {
    rec: &'a csv::StringRecord,
    cols: &'a BTreeMap<String, usize>,
    path: &'a Path,
    line: usize,
}

impl Row<'_> {
    fn raw(&self, name: &str) -> Result<&str> {
        let i = self.cols.get(name).ok_or_else(|| {
            Error::Config(format!("{}: missing column {name}", self.path.display()))
        })?;
        Ok(self.rec.get(*i).unwrap_or(""))
    }

    fn bad(&self, name: &str, value: &str) -> Error {
        Error::Config(format!("{}:{}: bad value {value:?} in column {name}", self.path.display(), self.line))
    }

    fn parse<T: std::str::FromStr>(&self, name: &str) -> Result<T> {
        let v = self.raw(name)?;
        v.parse().map_err(|_| self.bad(name, v))
    }

    fn state(&self, agent: &str) -> Result<AgentState> {
        let g = |f: &str| self.parse::<f64>(&format!("{agent}_{f}"));
        Ok(AgentState::new(g("x")?, g("y")?, g("v")?, g("psi")?, g("delta")?))
    }

    fn series(&self, name: &str, n: usize) -> Result<Vec<f64>> {
        (1..=n).map(|i| self.parse(&format!("{name}_{i}"))).collect()
    }
}

pub fn read_trial_csv(path: &Path) -> Result<TrialRecord> {
    if !path.exists() {
        return Err(Error::Config(format!("{}: no such trial log", path.display())));
    }
    let mut r = csv::Reader::from_path(path)?;
    let cols: BTreeMap<String, usize> =
        r.headers()?.iter().enumerate().map(|(i, h)| (h.to_string(), i)).collect();
    let n = cols.keys().filter(|k| k.starts_with("pred_v_")).count();
    let records: Vec<csv::StringRecord> = r.records().collect::<std::result::Result<_, _>>()?;
    let Some((last, body)) = records.split_last() else {
        return Err(Error::Config(format!("{}: empty trial log", path.display())));
    };
    let row = |rec, line| Row { rec, cols: &cols, path, line };

    let first = row(records.first().unwrap(), 2);
    let label = first.raw("label")?.to_string();
    let trial = first.parse("trial")?;
    let ego_start_x = first.parse("ego_start_x")?;
    let outcome_s = first.raw("outcome")?;
    let outcome = Outcome::parse(outcome_s).ok_or_else(|| first.bad("outcome", outcome_s))?;
    let merge_s = first.raw("merge_step")?;
    let merge_step = if merge_s.is_empty() { None } else { Some(first.parse("merge_step")?) };
    let collision = first.parse("collision")?;

    let mut steps = Vec::with_capacity(body.len());
    let mut samples = Vec::with_capacity(body.len());
    for (i, rec) in body.iter().enumerate() {
        let r = row(rec, i + 2);
        let status_s = r.raw("status")?;
        let step = StepRecord {
            k: r.parse("k")?,
            time: r.parse("time")?,
            ego: r.state("ego")?,
            follower: r.state("follower")?,
            leader: r.state("leader")?,
            input: AgentInput::new(r.parse("accel")?, r.parse("steer_rate")?),
            follower_accel: r.parse("follower_accel")?,
            residual: r.parse("residual")?,
            data_size: r.parse("data_size")?,
            solve_ms: r.parse("solve_ms")?,
            iterations: r.parse("iterations")?,
            status: parse_status(status_s).ok_or_else(|| r.bad("status", status_s))?,
            fallback: r.parse("fallback")?,
            pred_v: r.series("pred_v", n)?,
            pred_x: r.series("pred_x", n)?,
            pred_sigma_x: r.series("pred_sigma_x", n)?,
            hc_follower: r.series("hc_follower", n)?,
            hc_leader: r.series("hc_leader", n)?,
        };
        let z = features::assemble(
            &step.ego.to_vector(),
            &step.follower.to_vector(),
            &step.leader.to_vector(),
            &step.input.to_vector(),
        );
        samples.push((z, step.residual));
        steps.push(step);
    }
    let t = row(last, records.len() + 1);
    let terminal = (t.state("ego")?, t.state("follower")?, t.state("leader")?);
    Ok(TrialRecord {
        label,
        trial,
        ego_start_x,
        steps,
        terminal,
        outcome,
        merge_step,
        collision,
        samples,
    })
}

pub fn trial_file_name(index: usize) -> String {
    format!("trial_{index}.csv")
}

/// Table-1 columns of one controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryRow {
    pub success: usize,
    pub mean_abs_err: f64,
    pub mean_solve_ms: f64,
    pub pct_realtime: f64,
}

impl From<&BatchSummary> for SummaryRow {
    fn from(s: &BatchSummary) -> Self {
        Self {
            success: s.success,
            mean_abs_err: s.mean_abs_err,
            mean_solve_ms: s.mean_solve_ms,
            pct_realtime: s.pct_realtime,
        }
    }
}

/// `summary.json`: controller label to its Table-1 row.
pub fn summary_json(summaries: &[BatchSummary]) -> String {
    let map: BTreeMap<&str, SummaryRow> =
        summaries.iter().map(|s| (s.controller.as_str(), SummaryRow::from(s))).collect();
    serde_json::to_string_pretty(&map).expect("summary serializes")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryDetails {
    pub seed: u64,
    pub grid: Vec<f64>,
    pub summaries: Vec<BatchSummary>,
    /// Trial CSV file name for every run, in write order.
    pub trials: Vec<TrialIndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialIndexEntry {
    pub file: String,
    pub controller: String,
    pub trial: usize,
    pub ego_start_x: f64,
    pub outcome: String,
}

/// Writes `summary.json`, `summary_details.json` and one CSV per trial.
/// Returns the trial file paths.
pub fn write_batch(
    out: &Path,
    seed: u64,
    grid: &[f64],
    summaries: &[BatchSummary],
    records: &[TrialRecord],
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut paths = Vec::with_capacity(records.len());
    let mut index = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let name = trial_file_name(i);
        let p = out.join(&name);
        write_trial_csv(&p, rec)?;
        index.push(TrialIndexEntry {
            file: name,
            controller: rec.label.clone(),
            trial: rec.trial,
            ego_start_x: rec.ego_start_x,
            outcome: rec.outcome.as_str().to_string(),
        });
        paths.push(p);
    }
    fs::write(out.join("summary.json"), summary_json(summaries))?;
    let details = SummaryDetails {
        seed,
        grid: grid.to_vec(),
        summaries: summaries.to_vec(),
        trials: index,
    };
    fs::write(
        out.join("summary_details.json"),
        serde_json::to_string_pretty(&details)?,
    )?;
    Ok(paths)
}

/// Fixed-width summary table, one row per controller.
pub fn format_summary_table(summaries: &[BatchSummary]) -> String {
    let mut s = format!(
        "{:<15} {:>9} {:>10} {:>12} {:>13}\n",
        "controller", "success", "mean |e|", "mean Tc [ms]", "Tc < Ts [%]"
    );
    for b in summaries {
        s.push_str(&format!(
            "{:<15} {:>5}/{:<3} {:>10.3} {:>12.1} {:>13.1}\n",
            b.controller, b.success, b.trials, b.mean_abs_err, b.mean_solve_ms, b.pct_realtime
        ));
    }
    s
}

/// One time-lapse frame: poses and the Follower's final predicted position
/// with its 2-sigma bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct TimelapseRow {
    pub label: String,
    pub trial: usize,
    pub k: usize,
    pub time: f64,
    pub ego: AgentState,
    pub follower: AgentState,
    pub leader: AgentState,
    pub pred_x_final: f64,
    pub pred_x_lo: f64,
    pub pred_x_hi: f64,
}

/// Frames every `stride` steps (always including step 0).
pub fn timelapse(record: &TrialRecord, stride: usize) -> Vec<TimelapseRow> {
    let stride = stride.max(1);
    record
        .steps
        .iter()
        .filter(|s| s.k % stride == 0)
        .filter_map(|s| {
            let mu = *s.pred_x.last()?;
            let sd = *s.pred_sigma_x.last()?;
            Some(TimelapseRow {
                label: record.label.clone(),
                trial: record.trial,
                k: s.k,
                time: s.time,
                ego: s.ego,
                follower: s.follower,
                leader: s.leader,
                pred_x_final: mu,
                pred_x_lo: mu - 2.0 * sd,
                pred_x_hi: mu + 2.0 * sd,
            })
        })
        .collect()
}

/// Prediction error at each step averaged over the given trials.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCurvePoint {
    pub k: usize,
    pub time: f64,
    pub mean_abs_err: f64,
    pub trials: usize,
}

pub fn error_curve(records: &[&TrialRecord]) -> Vec<ErrorCurvePoint> {
    let len = records.iter().map(|r| r.steps.len()).max().unwrap_or(0);
    (0..len)
        .filter_map(|k| {
            let errs: Vec<(f64, f64)> = records
                .iter()
                .filter_map(|r| prediction_error(r, k).map(|e| (e, r.steps[k].time)))
                .collect();
            if errs.is_empty() {
                return None;
            }
            let m = errs.len() as f64;
            Some(ErrorCurvePoint {
                k,
                time: errs[0].1,
                mean_abs_err: errs.iter().map(|e| e.0).sum::<f64>() / m,
                trials: errs.len(),
            })
        })
        .collect()
}

pub struct PlotOutput {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

/// Writes `timelapse.csv` and one `error_<controller>_<outcome>.csv` per
/// controller present and outcome. Empty groups give a header-only file and
/// a warning.
pub fn write_plotdata(records: &[TrialRecord], out: &Path, stride: usize) -> Result<PlotOutput> {
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    let mut warnings = Vec::new();

    let tl = out.join("timelapse.csv");
    let mut w = csv::Writer::from_path(&tl)?;
    let mut h: Vec<String> = ["label", "trial", "k", "time"].iter().map(|s| s.to_string()).collect();
    for a in AGENTS {
        for f in ["x", "y", "psi"] {
            h.push(format!("{a}_{f}"));
        }
    }
    h.extend(["follower_pred_x", "follower_pred_x_lo", "follower_pred_x_hi"].map(String::from));
    w.write_record(&h)?;
    for rec in records {
        for f in timelapse(rec, stride) {
            let mut row = vec![f.label.clone(), f.trial.to_string(), f.k.to_string(), f.time.to_string()];
            for a in [&f.ego, &f.follower, &f.leader] {
                row.extend([a.x, a.y, a.psi].map(|v| v.to_string()));
            }
            row.extend([f.pred_x_final, f.pred_x_lo, f.pred_x_hi].map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    files.push(tl);

    let mut labels: Vec<&str> = records.iter().map(|r| r.label.as_str()).collect();
    labels.sort();
    labels.dedup();
    for label in labels {
        for outcome in [Outcome::Between, Outcome::Behind, Outcome::Failed] {
            let group: Vec<&TrialRecord> =
                records.iter().filter(|r| r.label == label && r.outcome == outcome).collect();
            let p = out.join(format!("error_{label}_{}.csv", outcome.as_str()));
            let mut w = csv::Writer::from_path(&p)?;
            w.write_record(["k", "time", "mean_abs_err", "trials"])?;
            if group.is_empty() {
                warnings.push(format!("no {label} trials with outcome {}", outcome.as_str()));
            }
            for pt in error_curve(&group) {
                w.write_record([
                    pt.k.to_string(),
                    pt.time.to_string(),
                    pt.mean_abs_err.to_string(),
                    pt.trials.to_string(),
                ])?;
            }
            w.flush()?;
            files.push(p);
        }
    }
    Ok(PlotOutput { files, warnings })
}
