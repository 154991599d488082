use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::{
    filter_mse_loss, joint_nll_loss, surrogate_mse_loss, LearnError, LossKind, Supervision,
    SurrogateConfig,
};
use crate::diff::{cholesky_solve_dense, Scalar, Tape, Var};
use crate::factors::{Model, Task};
use crate::graph::{FactorGraph, HeadCache, VariableAssignment};
use crate::solve::{LinearBackend, SolverConfig};
use crate::tasks::{
    build_graph, evaluate, raw_measurements, Estimator, Record, FILTER_INITIAL_VARIANCE,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub supervision: Supervision,
    /// Unrolled steps of the surrogate loss.
    pub surrogate_steps: usize,
    /// Linear solver inside the unrolled steps.
    pub backend: LinearBackend,
    /// Fit the sensor mean and noise bias on a leading share of the records
    /// before the main loss sees the rest.
    pub pretrain: bool,
    pub pretrain_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig {
                learning_rate: 3e-3,
                ..Default::default()
            },
            batch_size: 16,
            epochs: 10,
            seed: 0,
            loss: LossKind::SurrogateMse,
            supervision: Supervision::Position,
            surrogate_steps: 5,
            backend: LinearBackend::cg_default(),
            pretrain: true,
            pretrain_fraction: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: &str| Err(LearnError::Config(m.to_string()));
        if !(self.adam.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.surrogate_steps == 0 {
            return bad("surrogate steps must be at least 1");
        }
        if !(0.0..1.0).contains(&self.pretrain_fraction) {
            return bad("pretrain fraction must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchDiagnostic {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Gradient statistics of the most recent batch plus the per-batch history.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientReport {
    pub loss: f64,
    pub grad_norm: f64,
    /// Gradient norm of every named slice.
    pub slice_norms: Vec<(String, f64)>,
    pub batches: Vec<BatchDiagnostic>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean batch loss.
    pub loss: f64,
    /// Mean batch gradient norm.
    pub grad_norm: f64,
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochMetrics>,
    pub report: GradientReport,
}

/// Velocity components of a state (for per-dimension normalisation).
fn velocity_range(task: Task) -> std::ops::Range<usize> {
    match task {
        Task::Disk => 2..4,
        Task::Odom2d => 4..6,
    }
}

/// Per-tangent-dimension loss weights for `supervision`. Velocity weights are
/// the inverse training-set standard deviations.
pub fn supervision_weights(task: Task, supervision: Supervision, records: &[&Record]) -> Vec<f64> {
    let d = task.state_kind().tangent_dim();
    let (pos, vel_tangent) = match task {
        Task::Disk => (0..2, 2..4),
        Task::Odom2d => (0..2, 3..5),
    };
    let mut alpha = vec![0.0; d];
    if matches!(supervision, Supervision::Position | Supervision::All) {
        alpha[pos].iter_mut().for_each(|a| *a = 1.0);
    }
    if matches!(supervision, Supervision::Velocity | Supervision::All) {
        let vr = velocity_range(task);
        for (slot, comp) in vel_tangent.zip(vr) {
            let xs: Vec<f64> = records
                .iter()
                .flat_map(|r| r.states.iter().map(move |s| s[comp]))
                .collect();
            let n = xs.len().max(1) as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            alpha[slot] = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        }
    }
    alpha
}

/// Floor on the transition RMSE used for initialization, so exactly
/// integrated components do not start at infinite precision.
const MIN_TRANSITION_RMSE: f64 = 1e-3;

/// Least-squares fit of the affine sensor correction on samples with a
/// visible target, then noise biases from the fitted sensor's RMSE and the
/// ground-truth transition residuals.
fn pretrain(model: &mut Model, records: &[&Record], origin: &[f64]) -> Result<(), LearnError> {
    let task = model.task();
    let m = model.spec.measurement_dim();
    let target = |s: &[f64]| -> Vec<f64> {
        match task {
            Task::Disk => s[0..2].to_vec(),
            Task::Odom2d => s[4..6].to_vec(),
        }
    };
    let mut samples = Vec::new();
    for r in records {
        for (raw, (s, p)) in raw_measurements(r, origin)
            .into_iter()
            .zip(r.states.iter().zip(&r.payloads))
        {
            samples.push((raw, target(s), p.feature));
        }
    }
    if samples.is_empty() {
        return Ok(());
    }
    if task == Task::Disk {
        // normal equations of [raw, 1] → target on visible samples
        let k = m + 1;
        let mut ata = vec![0.0; k * k];
        let mut atb = vec![0.0; k * m];
        for (raw, y, _) in samples.iter().filter(|s| s.2 > 0.0) {
            let row: Vec<f64> = raw.iter().copied().chain(std::iter::once(1.0)).collect();
            for i in 0..k {
                for j in 0..k {
                    ata[i * k + j] += row[i] * row[j];
                }
                for j in 0..m {
                    atb[i * m + j] += row[i] * y[j];
                }
            }
        }
        if let Ok(sol) = cholesky_solve_dense(&ata, &atb, k, m) {
            let id = model.affine_slice();
            let p = model.params.get_mut(id);
            for out in 0..m {
                for inp in 0..m {
                    p[out * m + inp] = sol[inp * m + out];
                }
                p[m * m + out] = sol[m * m + out];
            }
        }
    }
    let outputs = model.spec.head_outputs();
    let mut sq = vec![0.0; m];
    for (raw, y, _) in &samples {
        let z = model.sensor_mean(raw);
        for j in 0..m {
            sq[j] += (z[j] - y[j]).powi(2);
        }
    }
    let n = samples.len() as f64;
    let bias: Vec<f64> = if outputs == 1 {
        let rmse = (sq.iter().sum::<f64>() / (n * m as f64)).sqrt();
        vec![-rmse.max(1e-6).ln()]
    } else {
        sq.iter().map(|s| -(s / n).sqrt().max(1e-6).ln()).collect()
    };
    let id = model.sensor_noise_bias();
    model.params.get_mut(id).copy_from_slice(&bias);

    // transition noise from the ground-truth residual RMSE per dimension
    let kind = model.transition_factor(0, 1).kind;
    let d = kind.residual_dim();
    let mut sq = vec![0.0; d];
    let mut n = 0usize;
    for r in records {
        for w in r.states.windows(2) {
            let res = kind.residual::<f64>(&[&w[0], &w[1]], &[]);
            for (a, b) in sq.iter_mut().zip(&res) {
                *a += b * b;
            }
            n += 1;
        }
    }
    if n > 0 {
        let log: Vec<f64> = sq
            .iter()
            .map(|s| -(s / n as f64).sqrt().max(MIN_TRANSITION_RMSE).ln())
            .collect();
        let id = model.transition_slice();
        model.params.get_mut(id).copy_from_slice(&log);
    }
    Ok(())
}

fn batch_loss<'t>(
    model: &Model,
    theta: &[Var<'t>],
    items: &[&(FactorGraph, VariableAssignment)],
    config: &TrainConfig,
    alpha: &[f64],
) -> Result<Var<'t>, LearnError> {
    let mut cache = HeadCache::default();
    let surrogate = SurrogateConfig {
        steps: config.surrogate_steps,
        alpha: alpha.to_vec(),
        backend: config.backend.clone(),
    };
    let mut losses = Vec::with_capacity(items.len());
    let mut count = 0usize;
    for (graph, gt) in items {
        let inst = graph.instantiate_cached(&model.params, theta, &mut cache)?;
        let l = match config.loss {
            LossKind::SurrogateMse => surrogate_mse_loss(graph, gt, &inst, &surrogate)?,
            LossKind::JointNll => joint_nll_loss(graph, gt, &inst)?,
            LossKind::FilterMse => {
                filter_mse_loss(graph, gt, &inst, alpha, FILTER_INITIAL_VARIANCE)?
            }
        };
        losses.push(l);
        count += gt.len();
    }
    Ok(Var::sum(&losses) / count.max(1) as f64)
}

fn slice_norms(model: &Model, grad: &[f64]) -> Vec<(String, f64)> {
    model
        .params
        .slices()
        .iter()
        .map(|s| {
            let n = grad[s.range()].iter().map(|g| g * g).sum::<f64>().sqrt();
            (s.name.clone(), n)
        })
        .collect()
}

/// Mean loss and its gradient over `records` at the current parameters.
pub fn loss_and_gradient(
    model: &Model,
    records: &[&Record],
    origin: &[f64],
    config: &TrainConfig,
    alpha: &[f64],
) -> Result<(f64, Vec<f64>), LearnError> {
    let items: Vec<(FactorGraph, VariableAssignment)> = records
        .iter()
        .map(|r| build_graph(r, model, origin))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&(FactorGraph, VariableAssignment)> = items.iter().collect();
    let tape = Tape::new();
    let theta = model.params.to_tape(&tape, &vec![true; model.params.len()]);
    let loss = batch_loss(model, &theta, &refs, config, alpha)?;
    let grads = tape.backward(loss)?;
    Ok((loss.value(), grads.wrt_all(&theta)))
}

/// Trains `model` in place. Pretraining (when enabled and there is at least
/// one epoch) consumes the first `pretrain_fraction` of `records`; the main
/// loss uses the rest. `validation` is evaluated after every epoch.
pub fn train(
    model: &mut Model,
    records: &[&Record],
    origin: &[f64],
    config: &TrainConfig,
    validation: Option<(&[&Record], Estimator)>,
) -> Result<TrainOutcome, LearnError> {
    config.validate()?;
    let mut report = GradientReport::default();
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            epochs: Vec::new(),
            report,
        });
    }
    if records.is_empty() {
        return Err(LearnError::Config("no training records".into()));
    }
    let main: &[&Record] = if config.pretrain {
        let n_pre = ((records.len() as f64) * config.pretrain_fraction).floor() as usize;
        pretrain(model, &records[..n_pre], origin)?;
        if n_pre == records.len() {
            records
        } else {
            &records[n_pre..]
        }
    } else {
        records
    };
    let alpha = supervision_weights(model.task(), config.supervision, main);
    let items: Vec<(FactorGraph, VariableAssignment)> = main
        .iter()
        .map(|r| build_graph(r, model, origin))
        .collect::<Result<_, _>>()?;
    let mask = model.trainable_mask();
    let mut adam = AdamState::new(model.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut norm_sum, mut n_batches) = (0.0, 0.0, 0usize);
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&(FactorGraph, VariableAssignment)> =
                chunk.iter().map(|&i| &items[i]).collect();
            let tape = Tape::new();
            let theta = model.params.to_tape(&tape, &mask);
            let loss = batch_loss(model, &theta, &refs, config, &alpha)?;
            let value = loss.value();
            let grad = if value.is_finite() {
                tape.backward(loss).ok().map(|g| g.wrt_all(&theta))
            } else {
                None
            };
            let grad_norm = grad
                .as_ref()
                .map_or(f64::NAN, |g| g.iter().map(|x| x * x).sum::<f64>().sqrt());
            report.loss = value;
            report.grad_norm = grad_norm;
            report.batches.push(BatchDiagnostic {
                epoch,
                batch,
                loss: value,
                grad_norm,
            });
            let Some(grad) = grad.filter(|_| value.is_finite() && grad_norm.is_finite()) else {
                let what = if value.is_finite() {
                    "gradient"
                } else {
                    "loss"
                };
                return Err(LearnError::NonFinite {
                    what,
                    epoch,
                    batch,
                    report: Box::new(report),
                });
            };
            report.slice_norms = slice_norms(model, &grad);
            adam_step(
                model.params.values_mut(),
                &grad,
                &mut adam,
                &config.adam,
                &mask,
            );
            loss_sum += value;
            norm_sum += grad_norm;
            n_batches += 1;
        }
        let val_metric = validation.map(|(recs, est)| {
            let r = evaluate(model, recs, origin, est, &SolverConfig::evaluation());
            r.mean()[0]
        });
        epochs.push(EpochMetrics {
            epoch,
            loss: loss_sum / n_batches.max(1) as f64,
            grad_norm: norm_sum / n_batches.max(1) as f64,
            val_metric,
        });
    }
    Ok(TrainOutcome { epochs, report })
}
