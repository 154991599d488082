use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FactorKind, Mlp, PRIOR_POSE_SQRT_PREC, PRIOR_VELOCITY_SQRT_PREC};
use crate::diff::Scalar;
use crate::graph::{Factor, GraphError, Measurement, NoiseModel, ParameterStore, SliceId};
use crate::lie::ManifoldKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Disk,
    Odom2d,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Disk => "disk",
            Task::Odom2d => "odom2d",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "disk" => Some(Task::Disk),
            "odom2d" | "odom" => Some(Task::Odom2d),
            _ => None,
        }
    }

    pub fn state_kind(&self) -> ManifoldKind {
        match self {
            Task::Disk => super::DISK_STATE,
            Task::Odom2d => super::SE2_STATE,
        }
    }

    fn prefix(&self) -> &'static str {
        match self {
            Task::Disk => "disk.vision",
            Task::Odom2d => "odom.velocity",
        }
    }

    fn transition_slice(&self) -> &'static str {
        match self {
            Task::Disk => "disk.transition.log_sqrt_prec",
            Task::Odom2d => "odom.transition.log_sqrt_prec",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Constant,
    Heteroscedastic,
}

impl NoiseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseKind::Constant => "constant",
            NoiseKind::Heteroscedastic => "heteroscedastic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(NoiseKind::Constant),
            "heteroscedastic" | "hetero" => Some(NoiseKind::Heteroscedastic),
            _ => None,
        }
    }
}

/// Virtual-sensor observation attached to one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Payload {
    pub z: Vec<f64>,
    pub feature: f64,
}

/// Structural choices for a task model; parameter values live in
/// [`Model::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub task: Task,
    pub noise: NoiseKind,
    /// Include the quadratic drag term in the disk dynamics.
    pub drag: bool,
    /// Integration step of the SE(2) velocity model.
    pub dt: f64,
    pub hidden: Vec<usize>,
    /// Multiplier applied to the feature before the noise network.
    pub feature_scale: f64,
}

/// Disk visible-pixel count of a fully visible tracked disk (radius 8).
pub const DISK_FULL_PIXELS: f64 = 201.0;

impl ModelSpec {
    pub fn new(task: Task, noise: NoiseKind) -> Self {
        ModelSpec {
            task,
            noise,
            drag: true,
            dt: 1.0,
            hidden: vec![64; 4],
            feature_scale: match task {
                Task::Disk => 1.0 / DISK_FULL_PIXELS,
                Task::Odom2d => 1.0,
            },
        }
    }

    /// Measurement dimension of the virtual sensor.
    pub fn measurement_dim(&self) -> usize {
        2
    }

    /// Output width of the noise network: one tied precision for the disk
    /// centroid, one per velocity channel for odometry.
    pub fn head_outputs(&self) -> usize {
        match self.task {
            Task::Disk => 1,
            Task::Odom2d => 2,
        }
    }
}

/// A task model: structure plus the parameter store it reads from.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParameterStore,
    affine: SliceId,
    transition: SliceId,
    noise: SensorNoise,
}

#[derive(Debug, Clone)]
enum SensorNoise {
    Constant(SliceId),
    Network(Arc<Mlp>),
}

fn transition_init(task: Task) -> Vec<f64> {
    match task {
        // process-noise covariances 0.1 (position) and 2 (velocity)
        Task::Disk => {
            let p = -0.5 * 0.1f64.ln();
            let v = -0.5 * 2.0f64.ln();
            vec![p, p, v, v]
        }
        Task::Odom2d => vec![0.0; 5],
    }
}

impl Model {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self, GraphError> {
        let mut params = ParameterStore::new();
        let prefix = spec.task.prefix();
        let m = spec.measurement_dim();
        let mut affine = vec![0.0; m * m + m];
        for i in 0..m {
            affine[i * m + i] = 1.0;
        }
        params.register(&format!("{prefix}.affine"), &[m * m + m], &affine)?;
        let init = transition_init(spec.task);
        params.register(spec.task.transition_slice(), &[init.len()], &init)?;
        match spec.noise {
            NoiseKind::Constant => {
                let k = spec.head_outputs();
                params.register(&format!("{prefix}.log_sqrt_prec"), &[k], &vec![0.0; k])?;
            }
            NoiseKind::Heteroscedastic => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Mlp::register(
                    &mut params,
                    &format!("{prefix}.noise_mlp"),
                    &spec.hidden,
                    &vec![0.0; spec.head_outputs()],
                    spec.feature_scale,
                    &mut rng,
                )?;
            }
        }
        Model::from_params(spec, params)
    }

    /// Binds a spec to an existing store (for example one read from a
    /// checkpoint), checking that the expected slices exist.
    pub fn from_params(spec: ModelSpec, params: ParameterStore) -> Result<Self, GraphError> {
        let prefix = spec.task.prefix();
        let affine = params.require(&format!("{prefix}.affine"))?;
        let transition = params.require(spec.task.transition_slice())?;
        let noise = match spec.noise {
            NoiseKind::Constant => {
                SensorNoise::Constant(params.require(&format!("{prefix}.log_sqrt_prec"))?)
            }
            NoiseKind::Heteroscedastic => SensorNoise::Network(Arc::new(Mlp::from_store(
                &params,
                &format!("{prefix}.noise_mlp"),
                spec.feature_scale,
            )?)),
        };
        Ok(Model {
            spec,
            params,
            affine,
            transition,
            noise,
        })
    }

    /// Rebuilds a model from a bare store, reading the task and noise kind
    /// off the slice names and assuming default structure otherwise.
    pub fn detect(params: ParameterStore) -> Result<Self, GraphError> {
        let task = [Task::Disk, Task::Odom2d]
            .into_iter()
            .find(|t| params.id(t.transition_slice()).is_some())
            .ok_or_else(|| GraphError::UnknownSlice("<task>.transition.log_sqrt_prec".into()))?;
        let noise = if params
            .id(&format!("{}.log_sqrt_prec", task.prefix()))
            .is_some()
        {
            NoiseKind::Constant
        } else {
            NoiseKind::Heteroscedastic
        };
        Model::from_params(ModelSpec::new(task, noise), params)
    }

    pub fn task(&self) -> Task {
        self.spec.task
    }

    pub fn state_kind(&self) -> ManifoldKind {
        self.spec.task.state_kind()
    }

    pub fn affine_slice(&self) -> SliceId {
        self.affine
    }

    pub fn transition_slice(&self) -> SliceId {
        self.transition
    }

    /// Slice holding the constant sensor log square-root precision, or the
    /// output bias of the noise network.
    pub fn sensor_noise_bias(&self) -> SliceId {
        match &self.noise {
            SensorNoise::Constant(id) => *id,
            SensorNoise::Network(mlp) => mlp.output_bias(),
        }
    }

    pub fn head(&self) -> Option<&Arc<Mlp>> {
        match &self.noise {
            SensorNoise::Network(mlp) => Some(mlp),
            SensorNoise::Constant(_) => None,
        }
    }

    /// Slice-name prefixes of the noise parameters.
    pub fn noise_prefixes(&self) -> Vec<String> {
        let prefix = self.spec.task.prefix();
        vec![
            self.spec.task.transition_slice().to_string(),
            format!("{prefix}.log_sqrt_prec"),
            format!("{prefix}.noise_mlp"),
        ]
    }

    /// Entries updated during end-to-end training: everything for the disk
    /// task, only noise parameters for odometry.
    pub fn trainable_mask(&self) -> Vec<bool> {
        match self.spec.task {
            Task::Disk => vec![true; self.params.len()],
            Task::Odom2d => {
                let p = self.noise_prefixes();
                let refs: Vec<&str> = p.iter().map(String::as_str).collect();
                self.params.mask(&refs)
            }
        }
    }

    pub fn transition_factor(&self, from: usize, to: usize) -> Factor {
        let kind = match self.spec.task {
            Task::Disk => FactorKind::DiskTransition {
                drag: self.spec.drag,
            },
            Task::Odom2d => FactorKind::Se2Transition { dt: self.spec.dt },
        };
        let dim = kind.residual_dim();
        Factor {
            kind,
            vars: vec![from, to],
            measurement: Measurement::None,
            noise: NoiseModel::Constant {
                slice: self.transition,
                dim,
            },
        }
    }

    /// Virtual-sensor factor on `var`; `raw` is the analytic sensor output
    /// fed through the learnable affine correction.
    pub fn measurement_factor(&self, var: usize, raw: &[f64], feature: f64) -> Factor {
        let kind = match self.spec.task {
            Task::Disk => FactorKind::DiskVision,
            Task::Odom2d => FactorKind::Se2Velocity,
        };
        let dim = kind.residual_dim();
        let noise = match &self.noise {
            SensorNoise::Constant(slice) => NoiseModel::Constant { slice: *slice, dim },
            SensorNoise::Network(head) => NoiseModel::Heteroscedastic {
                head: head.clone(),
                feature,
                dim,
            },
        };
        Factor {
            kind,
            vars: vec![var],
            measurement: Measurement::Affine {
                slice: self.affine,
                raw: raw.to_vec(),
            },
            noise,
        }
    }

    /// Anchor on the first state; only the odometry task has one.
    pub fn prior_factor(&self, var: usize, anchor: &[f64]) -> Option<Factor> {
        match self.spec.task {
            Task::Disk => None,
            Task::Odom2d => {
                let p = PRIOR_POSE_SQRT_PREC;
                let v = PRIOR_VELOCITY_SQRT_PREC;
                Some(Factor {
                    kind: FactorKind::Se2Prior,
                    vars: vec![var],
                    measurement: Measurement::Fixed(anchor.to_vec()),
                    noise: NoiseModel::Fixed(vec![p, p, p, v, v]),
                })
            }
        }
    }

    /// Sensor mean `A·raw + b` for the current parameters.
    pub fn sensor_mean(&self, raw: &[f64]) -> Vec<f64> {
        let p = self.params.get(self.affine);
        let m = raw.len();
        (0..m)
            .map(|i| f64::dot(&p[i * m..(i + 1) * m], raw) + p[m * m + i])
            .collect()
    }

    /// Sensor square-root precisions for one feature value.
    pub fn sensor_sqrt_prec(&self, feature: f64) -> Result<Vec<f64>, GraphError> {
        let dim = self.spec.measurement_dim();
        let log = match &self.noise {
            SensorNoise::Constant(id) => self.params.get(*id).to_vec(),
            SensorNoise::Network(head) => {
                head.forward(&self.params, self.params.values(), feature)?
            }
        };
        Ok(if log.len() == 1 {
            vec![log[0].exp(); dim]
        } else {
            log.iter().map(|l| l.exp()).collect()
        })
    }

    /// Square-root precisions of the transition noise.
    pub fn transition_sqrt_prec(&self) -> Vec<f64> {
        self.params
            .get(self.transition)
            .iter()
            .map(|l| l.exp())
            .collect()
    }
}
