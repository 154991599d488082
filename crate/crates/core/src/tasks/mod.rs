//! Simulators, datasets, graph construction and evaluation metrics.

pub mod dataset;
pub mod disk;
pub mod odom;

use thiserror::Error;

pub use dataset::{
    record_seed, DatasetHeader, GeneratorConfig, Record, TrajectoryDataset, DATASET_FORMAT_VERSION,
};
pub use disk::DiskSimConfig;
pub use odom::OdomSimConfig;

use crate::factors::{Model, Task};
use crate::filter::{ekf_means, Belief, FilterError};
use crate::graph::{FactorGraph, GraphError, VariableAssignment};
use crate::lie::{Se2, Twist2};
use crate::solve::{map_inference, SolveError, SolverConfig};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Filter(#[from] FilterError),
}

/// Initial belief covariance of the filter (the mean is the true first state).
pub const FILTER_INITIAL_VARIANCE: f64 = 1e-6;

/// Analytic sensor outputs `payload.z − origin` of a record.
pub fn raw_measurements(record: &Record, origin: &[f64]) -> Vec<Vec<f64>> {
    record
        .payloads
        .iter()
        .map(|p| p.z.iter().zip(origin).map(|(z, o)| z - o).collect())
        .collect()
}

/// Chain graph of a record: one variable per timestep, a transition factor
/// per adjacent pair, a sensor factor per timestep and, for odometry, a prior
/// on the first state. Returns the graph and the ground-truth assignment.
pub fn build_graph(
    record: &Record,
    model: &Model,
    origin: &[f64],
) -> Result<(FactorGraph, VariableAssignment), TaskError> {
    let kind = model.state_kind();
    let n = record.states.len();
    if n == 0 || record.payloads.len() != n {
        return Err(TaskError::Format(format!(
            "record {}: {} states, {} payloads",
            record.index,
            n,
            record.payloads.len()
        )));
    }
    if let Some(s) = record.states.iter().find(|s| s.len() != kind.value_dim()) {
        return Err(TaskError::Format(format!(
            "record {}: state of width {} for task {}",
            record.index,
            s.len(),
            model.task().as_str()
        )));
    }
    let raw = raw_measurements(record, origin);
    let mut factors = Vec::with_capacity(2 * n);
    if let Some(p) = model.prior_factor(0, &record.states[0]) {
        factors.push(p);
    }
    for t in 0..n - 1 {
        factors.push(model.transition_factor(t, t + 1));
    }
    for (t, (r, p)) in raw.iter().zip(&record.payloads).enumerate() {
        factors.push(model.measurement_factor(t, r, p.feature));
    }
    let graph = FactorGraph::new(vec![kind; n], factors)?;
    Ok((graph, record.states.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Smoother,
    Filter,
    /// Virtual-sensor output used directly (dead-reckoned for odometry).
    Raw,
    /// Echoes the ground truth; a sanity check for the metric pipeline.
    GroundTruth,
}

impl Estimator {
    pub fn as_str(&self) -> &'static str {
        match self {
            Estimator::Smoother => "smoother",
            Estimator::Filter => "ekf",
            Estimator::Raw => "raw",
            Estimator::GroundTruth => "gt",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "smoother" => Some(Estimator::Smoother),
            "ekf" | "filter" => Some(Estimator::Filter),
            "raw" => Some(Estimator::Raw),
            "gt" | "ground-truth" => Some(Estimator::GroundTruth),
            _ => None,
        }
    }
}

/// Trajectory obtained by integrating sensor velocities from the first true
/// pose.
fn dead_reckon(model: &Model, record: &Record, raw: &[Vec<f64>]) -> VariableAssignment {
    let dt = model.spec.dt;
    let mut pose = Se2::from_slice(&record.states[0][..4]);
    let mut out = Vec::with_capacity(raw.len());
    for (t, r) in raw.iter().enumerate() {
        let vw = model.sensor_mean(r);
        if t > 0 {
            let prev: &Vec<f64> = &out[t - 1];
            pose = pose.compose(&Se2::exp(&Twist2::new(prev[4] * dt, 0.0, prev[5] * dt)));
        }
        let mut s = pose.to_array().to_vec();
        s.extend_from_slice(&vw);
        out.push(s);
    }
    out
}

/// Sensor-only trajectory: measured positions with zero velocity for the
/// disk, dead reckoning for odometry.
pub fn raw_estimate(model: &Model, record: &Record, origin: &[f64]) -> VariableAssignment {
    let raw = raw_measurements(record, origin);
    match model.task() {
        Task::Disk => raw
            .iter()
            .map(|r| {
                let p = model.sensor_mean(r);
                vec![p[0], p[1], 0.0, 0.0]
            })
            .collect(),
        Task::Odom2d => dead_reckon(model, record, &raw),
    }
}

/// An estimated trajectory plus solver diagnostics.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub x: VariableAssignment,
    /// Whether accepted LM costs never increased (smoother only).
    pub monotone: bool,
    /// The solver stopped on its damping limit; `x` is its best iterate.
    pub stalled: bool,
}

pub fn estimate(
    model: &Model,
    record: &Record,
    origin: &[f64],
    estimator: Estimator,
    solver: &SolverConfig,
) -> Result<Estimate, TaskError> {
    match estimator {
        Estimator::GroundTruth => Ok(Estimate {
            x: record.states.clone(),
            monotone: true,
            stalled: false,
        }),
        Estimator::Raw => Ok(Estimate {
            x: raw_estimate(model, record, origin),
            monotone: true,
            stalled: false,
        }),
        Estimator::Smoother => {
            let (graph, _) = build_graph(record, model, origin)?;
            let inst = graph.instantiate::<f64>(&model.params, model.params.values())?;
            let x0 = raw_estimate(model, record, origin);
            match map_inference(&graph, &x0, &inst, solver) {
                Ok(r) => Ok(Estimate {
                    monotone: r.monotone(),
                    x: r.x,
                    stalled: false,
                }),
                Err(SolveError::Stalled { best, .. }) => Ok(Estimate {
                    x: *best,
                    monotone: true,
                    stalled: true,
                }),
                Err(e) => Err(e.into()),
            }
        }
        Estimator::Filter => {
            let (graph, gt) = build_graph(record, model, origin)?;
            let inst = graph.instantiate::<f64>(&model.params, model.params.values())?;
            let initial =
                Belief::isotropic(gt[0].clone(), model.state_kind(), FILTER_INITIAL_VARIANCE);
            Ok(Estimate {
                x: ekf_means(&graph, &inst, initial)?,
                monotone: true,
                stalled: false,
            })
        }
    }
}

/// Position RMSE over a trajectory: `sqrt(mean_t ‖p̂_t − p_t‖²)`.
pub fn position_rmse(est: &[Vec<f64>], gt: &[Vec<f64>], pos: std::ops::Range<usize>) -> f64 {
    let mut s = 0.0;
    for (a, b) in est.iter().zip(gt) {
        for k in pos.clone() {
            s += (a[k] - b[k]).powi(2);
        }
    }
    (s / gt.len() as f64).sqrt()
}

/// Ground-truth distance travelled.
pub fn path_length(gt: &[Vec<f64>]) -> f64 {
    gt.windows(2)
        .map(|w| ((w[1][2] - w[0][2]).powi(2) + (w[1][3] - w[0][3]).powi(2)).sqrt())
        .sum()
}

/// Final-timestep translational (m/m) and heading (deg/m) errors normalised
/// by path length.
pub fn odometry_errors(est: &[Vec<f64>], gt: &[Vec<f64>]) -> (f64, f64) {
    let len = path_length(gt);
    let (a, b) = (est.last().expect("nonempty"), gt.last().expect("nonempty"));
    let trans = ((a[2] - b[2]).powi(2) + (a[3] - b[3]).powi(2)).sqrt();
    let rel = Se2::from_slice(&b[..4]).between(&Se2::from_slice(&a[..4]));
    let heading = rel.angle().abs().to_degrees();
    (trans / len, heading / len)
}

/// Metric names reported for a task.
pub fn metric_names(task: Task) -> &'static [&'static str] {
    match task {
        Task::Disk => &["rmse_px"],
        Task::Odom2d => &["trans_m_per_m", "rot_deg_per_m"],
    }
}

pub fn trajectory_metrics(task: Task, est: &[Vec<f64>], gt: &[Vec<f64>]) -> Vec<f64> {
    match task {
        Task::Disk => vec![position_rmse(est, gt, 0..2)],
        Task::Odom2d => {
            let (t, r) = odometry_errors(est, gt);
            vec![t, r]
        }
    }
}

/// Per-trajectory metrics over a set of records.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub task: Task,
    pub estimator: Estimator,
    /// `values[i]` holds the metrics of the `i`-th successfully estimated
    /// record, ordered as [`metric_names`].
    pub values: Vec<Vec<f64>>,
    pub failures: Vec<(usize, String)>,
    /// Records whose LM cost sequence increased on an accepted step.
    pub non_monotone: usize,
    pub stalled: usize,
}

impl MetricReport {
    pub fn names(&self) -> &'static [&'static str] {
        metric_names(self.task)
    }

    /// Mean of each metric over the successful records.
    pub fn mean(&self) -> Vec<f64> {
        let k = self.names().len();
        let mut m = vec![0.0; k];
        for v in &self.values {
            for (a, b) in m.iter_mut().zip(v) {
                *a += b;
            }
        }
        let n = self.values.len().max(1) as f64;
        m.iter().map(|a| a / n).collect()
    }
}

pub fn evaluate(
    model: &Model,
    records: &[&Record],
    origin: &[f64],
    estimator: Estimator,
    solver: &SolverConfig,
) -> MetricReport {
    let task = model.task();
    let mut report = MetricReport {
        task,
        estimator,
        values: Vec::with_capacity(records.len()),
        failures: Vec::new(),
        non_monotone: 0,
        stalled: 0,
    };
    for r in records {
        match estimate(model, r, origin, estimator, solver) {
            Ok(e) => {
                report.non_monotone += usize::from(!e.monotone);
                report.stalled += usize::from(e.stalled);
                report
                    .values
                    .push(trajectory_metrics(task, &e.x, &r.states));
            }
            Err(e) => report.failures.push((r.index, e.to_string())),
        }
    }
    report
}

/// Mean and standard error of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let se = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
        } else {
            0.0
        };
        MeanSe { mean, se }
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.se
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.se
    }

    /// Strictly below `other` with disjoint one-SE intervals.
    pub fn clearly_below(&self, other: &MeanSe) -> bool {
        self.upper() < other.lower()
    }
}
