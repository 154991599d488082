//! Acceptance run. Checks every criterion and prints one PASS/FAIL line each.
//!
//! The experiment criteria drive the `smoothlearn` binary at full size, which
//! takes a while. `SMOOTHLEARN_ACCEPTANCE_QUICK=1` shrinks the experiments
//! for a smoke run (their verdicts then say so), and
//! `SMOOTHLEARN_ACCEPTANCE_STRICT=1` turns any FAIL into a non-zero exit.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use smoothlearn::factors::{FactorKind, Mlp, Model, ModelSpec, NoiseKind, Payload, Task};
use smoothlearn::filter::{ekf_run, Belief};
use smoothlearn::graph::{Factor, FactorGraph, Measurement, NoiseModel, ParameterStore};
use smoothlearn::learn::{
    loss_and_gradient, read_checkpoint, supervision_weights, LossKind, Supervision, TrainConfig,
};
use smoothlearn::lie::{ManifoldKind, Se2, Twist2};
use smoothlearn::solve::{cg_solve, cholesky_solve, gn_step, BlockSparseSym, LinearBackend};
use smoothlearn::tasks::disk::disk_step;
use smoothlearn::tasks::{
    raw_measurements, DiskSimConfig, GeneratorConfig, OdomSimConfig, Record, TrajectoryDataset,
};
use smoothlearn::{Scalar, Tape, Var};

type Verdict = Result<String, String>;

struct Settings {
    quick: bool,
    work: PathBuf,
}

impl Settings {
    /// Size overrides applied to experiment runs in quick mode.
    fn sizes(&self, experiment: &str) -> Vec<String> {
        if !self.quick {
            return Vec::new();
        }
        let keys: &[&str] = match experiment {
            "disk-compare" => &["disk_compare.records=60", "disk_compare.folds=2"],
            "odom-compare" => &["odom_compare.records=30", "odom_compare.folds=2"],
            _ => &["noise_transfer.records=30", "noise_transfer.seeds=2"],
        };
        let mut out: Vec<String> = keys.iter().map(|s| s.to_string()).collect();
        out.push("train.epochs=2".into());
        out
    }

    fn note(&self) -> &'static str {
        if self.quick {
            " [quick mode: reduced sizes]"
        } else {
            ""
        }
    }
}

fn main() {
    let flag = |k: &str| std::env::var(k).is_ok_and(|v| v == "1" || v == "true");
    let settings = Settings {
        quick: flag("SMOOTHLEARN_ACCEPTANCE_QUICK"),
        work: PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"),
    };
    let _ = fs::remove_dir_all(&settings.work);
    fs::create_dir_all(&settings.work).expect("work directory");

    let mut experiments = Experiments::default();
    let criteria: Vec<(&str, &str, Box<dyn FnMut() -> Verdict + '_>)> = vec![
        (
            "1",
            "smoothing matches the RTS oracle",
            Box::new(smoothing_oracle),
        ),
        (
            "2",
            "filtering matches the Kalman oracle",
            Box::new(filtering_oracle),
        ),
        (
            "3",
            "gradients match finite differences",
            Box::new(gradient_suite),
        ),
        (
            "4",
            "true parameters are a fixed point",
            Box::new(fixed_point),
        ),
        (
            "5",
            "joint NLL recovers the residual covariance",
            Box::new(|| mle_recovery(&settings)),
        ),
    ];
    let mut results = Vec::new();
    for (id, name, mut f) in criteria {
        results.push(report(id, name, &mut *f));
    }
    results.push(report("6", "disk experiment ordering", &mut || {
        criterion_disk(&settings, &mut experiments)
    }));
    results.push(report("7", "noise-transfer ordering", &mut || {
        criterion_transfer(&settings, &mut experiments)
    }));
    results.push(report(
        "8",
        "heteroscedastic variance direction",
        &mut || criterion_variance(&settings, &mut experiments),
    ));
    results.push(report(
        "9",
        "solver cross-checks and monotone LM",
        &mut || criterion_solvers(&settings, &mut experiments),
    ));
    results.push(report("10", "Lie group suite", &mut lie_suite));
    results.push(report("11", "noise-transfer determinism", &mut || {
        criterion_determinism(&settings, &mut experiments)
    }));

    let failed = results.iter().filter(|p| !**p).count();
    println!(
        "acceptance: {} passed, {failed} failed{}",
        results.len() - failed,
        settings.note()
    );
    if failed > 0 && flag("SMOOTHLEARN_ACCEPTANCE_STRICT") {
        std::process::exit(1);
    }
}

fn report(id: &str, name: &str, f: &mut dyn FnMut() -> Verdict) -> bool {
    let start = Instant::now();
    let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail, ok) = match verdict {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    println!("{tag} {id:>2} {name}: {detail} ({secs:.1} s)");
    ok
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1 and 2

const T: usize = 20;
const N: usize = 4;
const M: usize = 2;

struct Chain {
    a: DMatrix<f64>,
    c: DMatrix<f64>,
    q: DVector<f64>,
    r: DVector<f64>,
    m0: DVector<f64>,
    p0: DVector<f64>,
    z: Vec<DVector<f64>>,
}

fn random_chain(rng: &mut ChaCha8Rng) -> Chain {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let a = DMatrix::identity(N, N) + DMatrix::from_fn(N, N, |_, _| 0.1 * u(-1.0, 1.0));
    let c = DMatrix::from_fn(M, N, |_, _| u(-1.0, 1.0));
    let q = DVector::from_fn(N, |_, _| u(0.05, 0.5));
    let r = DVector::from_fn(M, |_, _| u(0.1, 1.0));
    let m0 = DVector::from_fn(N, |_, _| u(-1.0, 1.0));
    let p0 = DVector::from_fn(N, |_, _| u(0.5, 2.0));
    let z = (0..T)
        .map(|_| DVector::from_fn(M, |_, _| u(-3.0, 3.0)))
        .collect();
    Chain {
        a,
        c,
        q,
        r,
        m0,
        p0,
        z,
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
        .collect()
}

fn chain_graph(ch: &Chain) -> FactorGraph {
    let inv_sqrt = |v: &DVector<f64>| v.iter().map(|x| 1.0 / x.sqrt()).collect::<Vec<_>>();
    let a: Arc<[f64]> = Arc::from(row_major(&ch.a));
    let c: Arc<[f64]> = Arc::from(row_major(&ch.c));
    let mut factors = vec![Factor {
        kind: FactorKind::LinearPrior { dim: N },
        vars: vec![0],
        measurement: Measurement::Fixed(ch.m0.iter().copied().collect()),
        noise: NoiseModel::Fixed(inv_sqrt(&ch.p0)),
    }];
    for t in 0..T {
        if t > 0 {
            factors.push(Factor {
                kind: FactorKind::LinearTransition {
                    dim: N,
                    a: a.clone(),
                },
                vars: vec![t - 1, t],
                measurement: Measurement::None,
                noise: NoiseModel::Fixed(inv_sqrt(&ch.q)),
            });
        }
        factors.push(Factor {
            kind: FactorKind::LinearObservation {
                state_dim: N,
                meas_dim: M,
                c: c.clone(),
            },
            vars: vec![t],
            measurement: Measurement::Fixed(ch.z[t].iter().copied().collect()),
            noise: NoiseModel::Fixed(inv_sqrt(&ch.r)),
        });
    }
    FactorGraph::new(vec![ManifoldKind::Euclidean(N); T], factors).unwrap()
}

fn kalman(ch: &Chain) -> Vec<(DVector<f64>, DMatrix<f64>)> {
    let q = DMatrix::from_diagonal(&ch.q);
    let r = DMatrix::from_diagonal(&ch.r);
    let mut m = ch.m0.clone();
    let mut p = DMatrix::from_diagonal(&ch.p0);
    let mut out = Vec::with_capacity(T);
    for t in 0..T {
        if t > 0 {
            m = &ch.a * &m;
            p = &ch.a * &p * ch.a.transpose() + &q;
        }
        let s = &ch.c * &p * ch.c.transpose() + &r;
        let k = &p * ch.c.transpose() * s.try_inverse().unwrap();
        m = &m + &k * (&ch.z[t] - &ch.c * &m);
        p = (DMatrix::identity(N, N) - &k * &ch.c) * &p;
        out.push((m.clone(), p.clone()));
    }
    out
}

fn rts(ch: &Chain) -> Vec<DVector<f64>> {
    let q = DMatrix::from_diagonal(&ch.q);
    let filtered = kalman(ch);
    let mut smoothed = vec![filtered[T - 1].0.clone(); T];
    for t in (0..T - 1).rev() {
        let (mf, pf) = &filtered[t];
        let pp = &ch.a * pf * ch.a.transpose() + &q;
        let g = pf * ch.a.transpose() * pp.try_inverse().unwrap();
        smoothed[t] = mf + &g * (&smoothed[t + 1] - &ch.a * mf);
    }
    smoothed
}

fn chains() -> Vec<Chain> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..50).map(|_| random_chain(&mut rng)).collect()
}

fn smoothing_oracle() -> Verdict {
    let start = Instant::now();
    let (mut worst, mut worst_step) = (0.0f64, 0.0f64);
    for ch in chains() {
        let g = chain_graph(&ch);
        let inst = g.instantiate::<f64>(&ParameterStore::new(), &[]).unwrap();
        let x0 = vec![vec![0.0; N]; T];
        let step = gn_step(&g, &x0, &inst, &LinearBackend::Cholesky).map_err(|e| e.to_string())?;
        for (a, b) in step.next.iter().zip(rts(&ch)) {
            for (x, y) in a.iter().zip(b.iter()) {
                worst = worst.max((x - y).abs());
            }
        }
        let second =
            gn_step(&g, &step.next, &inst, &LinearBackend::Cholesky).map_err(|e| e.to_string())?;
        worst_step = worst_step.max(second.delta.iter().map(|d| d * d).sum::<f64>().sqrt());
    }
    let secs = start.elapsed().as_secs_f64();
    let detail =
        format!("max |MAP - RTS| {worst:.2e}, second-step |delta| {worst_step:.2e}, {secs:.2} s");
    ensure(worst < 1e-8 && worst_step < 1e-10 && secs < 10.0, || {
        detail.clone()
    })?;
    Ok(detail)
}

fn filtering_oracle() -> Verdict {
    let mut worst = 0.0f64;
    for ch in chains() {
        let g = chain_graph(&ch);
        let inst = g.instantiate::<f64>(&ParameterStore::new(), &[]).unwrap();
        let cov = row_major(&DMatrix::from_diagonal(&ch.p0));
        let initial = Belief {
            mean: ch.m0.iter().copied().collect(),
            cov,
        };
        let beliefs = ekf_run(&g, &inst, initial).map_err(|e| e.to_string())?;
        for (b, (m, p)) in beliefs.iter().zip(kalman(&ch)) {
            for i in 0..N {
                worst = worst.max((b.mean[i] - m[i]).abs());
                for j in 0..N {
                    worst = worst.max((b.cov[i * N + j] - p[(i, j)]).abs());
                }
            }
        }
    }
    let detail = format!("max deviation of means and covariances {worst:.2e}");
    ensure(worst < 1e-10, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------- 3

fn vec_rel_err(a: &[f64], f: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(f)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / f.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-6)
}

fn central(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = p[i];
            p[i] = x0 + h;
            let up = f(&p);
            p[i] = x0 - h;
            let down = f(&p);
            p[i] = x0;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn random_value(kind: ManifoldKind, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match kind {
        ManifoldKind::Euclidean(n) => (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
        _ => {
            let a: f64 = rng.random_range(-3.1..3.1);
            let mut v = vec![
                a.cos(),
                a.sin(),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            ];
            v.extend((4..kind.value_dim()).map(|_| rng.random_range(-2.0..2.0)));
            v
        }
    }
}

/// `½‖r(x ⊕ δ; θ)‖²` for inputs `[δ, θ]`.
fn perturbed_cost<S: Scalar>(
    g: &FactorGraph,
    store: &ParameterStore,
    base: &[Vec<f64>],
    inputs: &[S],
) -> S {
    let mut off = 0;
    let mut x = Vec::new();
    for (kind, v) in g.variables().iter().zip(base) {
        let d = kind.tangent_dim();
        let lifted: Vec<S> = v.iter().map(|&a| S::constant(a)).collect();
        x.push(kind.oplus(&lifted, &inputs[off..off + d]).unwrap());
        off += d;
    }
    let inst = g.instantiate(store, &inputs[off..]).unwrap();
    g.map_cost(&x, &inst).unwrap()
}

fn factor_gradients(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let a: Arc<[f64]> = Arc::from(vec![1.0, 0.1, 0.0, -0.2, 0.9, 0.3, 0.0, 0.4, 1.1]);
    let c: Arc<[f64]> = Arc::from(vec![1.0, 0.5, -0.3, 0.0, 0.7, 1.2]);
    let kinds = [
        (FactorKind::LinearPrior { dim: 3 }, 3),
        (FactorKind::LinearTransition { dim: 3, a }, 0),
        (
            FactorKind::LinearObservation {
                state_dim: 3,
                meas_dim: 2,
                c,
            },
            2,
        ),
        (FactorKind::DiskTransition { drag: true }, 0),
        (FactorKind::DiskTransition { drag: false }, 0),
        (FactorKind::DiskVision, 2),
        (FactorKind::Se2Transition { dt: 0.1 }, 0),
        (FactorKind::Se2Velocity, 2),
        (FactorKind::Se2Prior, 6),
    ];
    let mut worst = 0.0f64;
    for (kind, z_dim) in kinds {
        for _ in 0..20 {
            let mut store = ParameterStore::new();
            let measurement = if z_dim > 0 {
                let mut affine: Vec<f64> = (0..z_dim * z_dim + z_dim)
                    .map(|_| rng.random_range(-0.2..0.2))
                    .collect();
                for i in 0..z_dim {
                    affine[i * z_dim + i] += 1.0;
                }
                let slice = store.register("affine", &[affine.len()], &affine).unwrap();
                Measurement::Affine {
                    slice,
                    raw: (0..z_dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                }
            } else {
                Measurement::None
            };
            let dim = kind.residual_dim();
            let lsp: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
            let slice = store.register("lsp", &[dim], &lsp).unwrap();
            let vars = kind.variable_kinds();
            let factor = Factor {
                vars: (0..vars.len()).collect(),
                kind: kind.clone(),
                measurement,
                noise: NoiseModel::Constant { slice, dim },
            };
            let g = FactorGraph::new(vars, vec![factor]).unwrap();
            let base: Vec<Vec<f64>> = g
                .variables()
                .iter()
                .map(|k| random_value(*k, rng))
                .collect();
            let mut inputs: Vec<f64> = (0..g.tangent_dim())
                .map(|_| rng.random_range(-0.5..0.5))
                .collect();
            inputs.extend_from_slice(store.values());
            let tape = Tape::new();
            let v = tape.inputs(&inputs);
            let cost = perturbed_cost::<Var>(&g, &store, &base, &v);
            let grad = tape.backward(cost).map_err(|e| e.to_string())?.wrt_all(&v);
            let fd = central(
                &|p| perturbed_cost::<f64>(&g, &store, &base, p),
                &inputs,
                1e-6,
            );
            worst = worst.max(vec_rel_err(&grad, &fd));
        }
    }
    Ok(worst)
}

fn network_gradients(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut store = ParameterStore::new();
        let bias = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let mlp = Mlp::register(&mut store, "head", &[8, 8], &bias, 0.1, rng).unwrap();
        let theta: Vec<f64> = store
            .values()
            .iter()
            .map(|v| v + 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let feature = rng.random_range(0.0..10.0);
        let w = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let tape = Tape::new();
        let v = tape.inputs(&theta);
        let out = mlp
            .forward(&store, &v, feature)
            .map_err(|e| e.to_string())?;
        let grad = tape
            .backward(out[0] * w[0] + out[1] * w[1])
            .map_err(|e| e.to_string())?
            .wrt_all(&v);
        let fd = central(
            &|p| {
                let o = mlp.forward(&store, p, feature).unwrap();
                o[0] * w[0] + o[1] * w[1]
            },
            &theta,
            1e-6,
        );
        worst = worst.max(vec_rel_err(&grad, &fd));
    }
    Ok(worst)
}

/// Loss gradients of whole models on short records: per coordinate outside
/// the noise network, along a unit random direction over everything.
fn loss_gradients(loss: LossKind, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let config = TrainConfig {
        loss,
        surrogate_steps: 2,
        backend: LinearBackend::Cholesky,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    for point in 0..20 {
        let task = if point % 2 == 0 {
            Task::Disk
        } else {
            Task::Odom2d
        };
        let noise = if point % 4 < 2 {
            NoiseKind::Constant
        } else {
            NoiseKind::Heteroscedastic
        };
        let generator = match task {
            Task::Disk => GeneratorConfig::Disk(DiskSimConfig {
                length: 5,
                ..Default::default()
            }),
            Task::Odom2d => GeneratorConfig::Odom2d(OdomSimConfig {
                length: 5,
                ..Default::default()
            }),
        };
        let ds = TrajectoryDataset::generate(generator, 2, point as u64);
        let records: Vec<&Record> = ds.records.iter().collect();
        let origin = ds.header.generator.sensor_origin();
        let alpha = supervision_weights(task, Supervision::All, &records);
        let mut model = Model::init(ModelSpec::new(task, noise), point as u64).unwrap();
        for v in model.params.values_mut() {
            *v += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
        let id = model.sensor_noise_bias();
        let shift = if task == Task::Disk { -1.5 } else { 1.0 };
        model
            .params
            .get_mut(id)
            .iter_mut()
            .for_each(|v| *v += shift);
        let value_at = |theta: &[f64]| {
            let mut m = model.clone();
            m.params.values_mut().copy_from_slice(theta);
            loss_and_gradient(&m, &records, &origin, &config, &alpha)
                .unwrap()
                .0
        };
        let (_, grad) = loss_and_gradient(&model, &records, &origin, &config, &alpha)
            .map_err(|e| e.to_string())?;
        let theta = model.params.values().to_vec();
        let coords: Vec<usize> = model
            .params
            .slices()
            .iter()
            .filter(|s| !s.name.contains("noise_mlp"))
            .flat_map(|s| s.range())
            .collect();
        let h = 1e-6;
        let (mut fd, mut ad) = (Vec::new(), Vec::new());
        for &i in &coords {
            let mut p = theta.clone();
            p[i] += h;
            let up = value_at(&p);
            p[i] -= 2.0 * h;
            fd.push((up - value_at(&p)) / (2.0 * h));
            ad.push(grad[i]);
        }
        worst = worst.max(vec_rel_err(&ad, &fd));
        let mut dir: Vec<f64> = (0..theta.len())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|d| *d /= norm);
        let step =
            |s: f64| -> Vec<f64> { theta.iter().zip(&dir).map(|(t, d)| t + s * d).collect() };
        let fd_dir = (value_at(&step(h)) - value_at(&step(-h))) / (2.0 * h);
        let ad_dir: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        worst = worst.max((ad_dir - fd_dir).abs() / ad_dir.abs().max(fd_dir.abs()).max(1e-6));
    }
    Ok(worst)
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let parts = [
        ("factors", factor_gradients(&mut rng)?),
        ("network", network_gradients(&mut rng)?),
        ("EKF loss", loss_gradients(LossKind::FilterMse, &mut rng)?),
        (
            "surrogate loss",
            loss_gradients(LossKind::SurrogateMse, &mut rng)?,
        ),
        ("joint NLL", loss_gradients(LossKind::JointNll, &mut rng)?),
    ];
    let secs = start.elapsed().as_secs_f64();
    let detail = parts
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    let detail = format!("max relative error: {detail}; {secs:.1} s");
    ensure(parts.iter().all(|p| p.1 < 1e-4) && secs < 60.0, || {
        detail.clone()
    })?;
    Ok(detail)
}

// ---------------------------------------------------------------------- 4

fn fixed_point() -> Verdict {
    let config = DiskSimConfig::default();
    let center = config.center();
    let disk: Vec<Record> = [[10.0, -20.0, 3.0, 1.5], [-40.0, 5.0, -2.0, 4.0]]
        .iter()
        .map(|&x0| {
            let mut x = x0;
            let mut rec = Record {
                index: 0,
                fold: 0,
                states: Vec::new(),
                payloads: Vec::new(),
            };
            for t in 0..15 {
                if t > 0 {
                    x = disk_step(&config, x);
                }
                rec.states.push(x.to_vec());
                rec.payloads.push(Payload {
                    z: vec![x[0] + center, x[1] + center],
                    feature: 201.0,
                });
            }
            rec
        })
        .collect();
    let odom: Vec<Record> = [(1.1, 0.05), (0.7, -0.02)]
        .iter()
        .map(|&(v, w)| {
            let mut pose = Se2::new(0.3, 1.0, -2.0);
            let mut rec = Record {
                index: 0,
                fold: 0,
                states: Vec::new(),
                payloads: Vec::new(),
            };
            for t in 0..15 {
                if t > 0 {
                    pose = pose.compose(&Se2::exp(&Twist2::new(v, 0.0, w)));
                }
                let mut s = pose.to_array().to_vec();
                s.extend([v, w]);
                rec.states.push(s);
                rec.payloads.push(Payload {
                    z: vec![v, w],
                    feature: 0.8,
                });
            }
            rec
        })
        .collect();
    let (mut worst_loss, mut worst_grad) = (0.0f64, 0.0f64);
    for (task, records, origin) in [
        (Task::Disk, &disk, vec![center; 2]),
        (Task::Odom2d, &odom, vec![0.0; 2]),
    ] {
        let refs: Vec<&Record> = records.iter().collect();
        for noise in [NoiseKind::Constant, NoiseKind::Heteroscedastic] {
            let model = Model::init(ModelSpec::new(task, noise), 0).unwrap();
            let tc = TrainConfig::default();
            let alpha = supervision_weights(task, Supervision::All, &refs);
            let (l, g) = loss_and_gradient(&model, &refs, &origin, &tc, &alpha)
                .map_err(|e| e.to_string())?;
            worst_loss = worst_loss.max(l);
            worst_grad = worst_grad.max(g.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
    }
    let detail = format!("max surrogate loss {worst_loss:.1e}, max gradient norm {worst_grad:.1e}");
    ensure(worst_loss < 1e-10 && worst_grad < 1e-10, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------- 5

fn run_cli(args: &[&str], extra: &[String]) -> Result<(), String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_smoothlearn"));
    cmd.args(args).env_remove("SMOOTHLEARN_SEED");
    for s in extra {
        cmd.args(["--set", s]);
    }
    let out = cmd.output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "`smoothlearn {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
                .lines()
                .last()
                .unwrap_or("")
        ))
    }
}

/// Disk model with constant noise trained on the joint NLL through the CLI;
/// the learned variances are compared with the mean squared residuals at the
/// ground truth under the learned sensor correction.
fn mle_recovery(settings: &Settings) -> Verdict {
    let dir = settings.work.join("mle");
    let d = dir.to_str().unwrap();
    run_cli(
        &[
            "gen",
            "--task",
            "disk",
            "--records",
            "60",
            "--seed",
            "5",
            "--out",
            d,
        ],
        &[],
    )?;
    let data = dir.join("dataset.jsonl");
    run_cli(
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--loss",
            "joint-nll",
            "--noise",
            "constant",
            "--epochs",
            "3000",
            "--lr",
            "0.05",
            "--seed",
            "5",
            "--out",
            d,
        ],
        &[
            "train.pretrain=false".into(),
            "train.batch_size=1000000".into(),
            "train.validate=false".into(),
        ],
    )?;
    let ds = TrajectoryDataset::read(&data).map_err(|e| e.to_string())?;
    let model = Model::detect(read_checkpoint(&dir.join("model.ckpt")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let GeneratorConfig::Disk(sim) = &ds.header.generator else {
        return Err("expected a disk dataset".into());
    };
    let (train, _) = ds.split(0);
    let origin = ds.header.generator.sensor_origin();
    // transitions: written out here from the simulator equations
    let mut tq = [0.0; 4];
    let mut n_t = 0.0;
    let mut sq = 0.0;
    let mut n_s = 0.0;
    let affine = model.params.get(model.affine_slice()).to_vec();
    for r in &train {
        for w in r.states.windows(2) {
            let (x, y) = (&w[0], &w[1]);
            let pred = [
                x[0] + x[2],
                x[1] + x[3],
                x[2] - sim.spring * x[0] - sim.drag * x[2] * x[2].abs(),
                x[3] - sim.spring * x[1] - sim.drag * x[3] * x[3].abs(),
            ];
            for k in 0..4 {
                tq[k] += (y[k] - pred[k]).powi(2);
            }
            n_t += 1.0;
        }
        for (raw, s) in raw_measurements(r, &origin).iter().zip(&r.states) {
            for i in 0..2 {
                let z = affine[i * 2] * raw[0] + affine[i * 2 + 1] * raw[1] + affine[4 + i];
                sq += (z - s[i]).powi(2);
                n_s += 1.0;
            }
        }
    }
    let learned_t: Vec<f64> = model
        .transition_sqrt_prec()
        .iter()
        .map(|s| 1.0 / (s * s))
        .collect();
    let learned_s = 1.0 / model.sensor_sqrt_prec(0.0).map_err(|e| e.to_string())?[0].powi(2);
    let mut worst = (learned_s / (sq / n_s) - 1.0).abs();
    for k in 0..4 {
        worst = worst.max((learned_t[k] / (tq[k] / n_t) - 1.0).abs());
    }
    let detail =
        format!(
        "sensor variance {learned_s:.4} vs {:.4}, transition {:?} vs {:?}, max relative gap {:.2}%",
        sq / n_s,
        learned_t.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
        tq.iter().map(|v| format!("{:.4}", v / n_t)).collect::<Vec<_>>(),
        100.0 * worst
    );
    ensure(worst < 0.02, || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------- experiment runs

type Table = Vec<HashMap<String, String>>;

fn read_table(path: &Path) -> Result<Table, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let header = r.headers().map_err(|e| e.to_string())?.clone();
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| e.to_string())?;
            Ok(header
                .iter()
                .map(String::from)
                .zip(rec.iter().map(String::from))
                .collect())
        })
        .collect()
}

fn field(row: &HashMap<String, String>, key: &str) -> Result<f64, String> {
    row.get(key)
        .ok_or_else(|| format!("missing column {key}"))?
        .parse()
        .map_err(|_| format!("column {key} is not a number"))
}

/// Lazily run experiment directories, shared between criteria.
#[derive(Default)]
struct Experiments {
    done: HashMap<String, Result<(PathBuf, f64), String>>,
}

impl Experiments {
    fn get(
        &mut self,
        settings: &Settings,
        name: &str,
        run: &str,
    ) -> Result<(PathBuf, f64), String> {
        let key = format!("{name}/{run}");
        self.done
            .entry(key.clone())
            .or_insert_with(|| {
                let dir = settings.work.join(&key);
                let start = Instant::now();
                run_cli(
                    &[
                        "experiment",
                        name,
                        "--seed",
                        "7",
                        "--out",
                        dir.to_str().unwrap(),
                    ],
                    &settings.sizes(name),
                )?;
                Ok((dir, start.elapsed().as_secs_f64()))
            })
            .clone()
    }
}

fn row<'a>(
    t: &'a Table,
    est: &str,
    noise: &str,
    loss: &str,
) -> Result<&'a HashMap<String, String>, String> {
    t.iter()
        .find(|r| r["estimator"] == est && r["noise"] == noise && r["loss"] == loss)
        .ok_or_else(|| format!("no summary row {est}/{noise}/{loss}"))
}

// ---------------------------------------------------------------------- 6

fn criterion_disk(settings: &Settings, ex: &mut Experiments) -> Verdict {
    let (dir, secs) = ex.get(settings, "disk-compare", "a")?;
    let t = read_table(&dir.join("summary.csv"))?;
    let stat = |est, noise, loss| -> Result<(f64, f64), String> {
        let r = row(&t, est, noise, loss)?;
        Ok((field(r, "rmse_px_mean")?, field(r, "rmse_px_se")?))
    };
    let e2e = stat("smoother", "heteroscedastic", "e2e-mse")?;
    let constant = stat("smoother", "constant", "e2e-mse")?;
    let raw = stat("raw", "-", "-")?;
    let ekf = stat("ekf", "heteroscedastic", "ekf-mse")?;
    let below = |a: (f64, f64), b: (f64, f64)| a.0 + a.1 < b.0 - b.1;
    let checks = [
        ("e2e hetero < constant", below(e2e, constant)),
        ("constant <= raw", below(constant, raw)),
        ("e2e hetero <= hetero EKF", below(e2e, ekf)),
        ("runtime < 30 min", secs < 1800.0),
    ];
    let fmt = |s: (f64, f64)| format!("{:.3}±{:.3}", s.0, s.1);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let detail = format!(
        "RMSE px: e2e hetero {}, constant {}, raw {}, hetero EKF {}; {:.0} s{}{}",
        fmt(e2e),
        fmt(constant),
        fmt(raw),
        fmt(ekf),
        secs,
        settings.note(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; violated: {}", failed.join(", "))
        }
    );
    ensure(failed.is_empty() && !settings.quick, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------- 7

fn criterion_transfer(settings: &Settings, ex: &mut Experiments) -> Verdict {
    let (dir, _) = ex.get(settings, "noise-transfer", "a")?;
    let t = read_table(&dir.join("table.csv"))?;
    let get = |train: &str, col: &str| -> Result<f64, String> {
        let r = t
            .iter()
            .find(|r| r["train_context"] == train)
            .ok_or_else(|| format!("no table row for {train}"))?;
        field(r, col)
    };
    let mut parts = Vec::new();
    let mut failed = Vec::new();
    for metric in ["trans_m_per_m", "rot_deg_per_m"] {
        let cell = |tr: &str, ev: &str| get(tr, &format!("{ev}_{metric}"));
        let (ff, fs) = (cell("ekf", "ekf")?, cell("ekf", "smoother")?);
        let (sf, ss) = (cell("smoother", "ekf")?, cell("smoother", "smoother")?);
        parts.push(format!(
            "{metric}: train ekf [ekf {ff:.5}, smoother {fs:.5}], train smoother [ekf {sf:.5}, smoother {ss:.5}]"
        ));
        for (label, ok) in [
            ("smoother <= filter (filter-trained)", fs <= ff),
            ("smoother <= filter (smoother-trained)", ss <= sf),
            ("filter context best with filter training", ff <= sf),
            ("smoother context best with smoother training", ss <= fs),
        ] {
            // rotation is reported alongside but not judged
            if !ok && metric == "trans_m_per_m" {
                failed.push(label.to_string());
            }
        }
    }
    let detail = format!(
        "{}{}{}",
        parts.join("; "),
        settings.note(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; violated: {}", failed.join(", "))
        }
    );
    ensure(failed.is_empty() && !settings.quick, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------- 8

fn criterion_variance(settings: &Settings, ex: &mut Experiments) -> Verdict {
    let (dir, _) = ex.get(settings, "disk-compare", "a")?;
    let t = read_table(&dir.join("variance.csv"))?;
    let mean_at = |feature: f64| -> Result<f64, String> {
        let mut vals = Vec::new();
        for r in t
            .iter()
            .filter(|r| r["loss"] == "e2e-mse" && r["noise"] == "heteroscedastic")
        {
            if field(r, "feature")? == feature {
                vals.push(field(r, "variance")?);
            }
        }
        ensure(!vals.is_empty(), || {
            format!("no variance rows at feature {feature}")
        })?;
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let (occluded, visible) = (mean_at(0.0)?, mean_at(201.0)?);
    let ratio = occluded / visible;
    let detail = format!(
        "variance at 0 visible pixels {occluded:.3}, at 201 {visible:.4}, ratio {ratio:.1}{}",
        settings.note()
    );
    ensure(ratio >= 10.0 && !settings.quick, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------- 9

fn chain_system(rng: &mut ChaCha8Rng) -> BlockSparseSym<f64> {
    let b = rng.random_range(1..=6);
    let blocks = rng.random_range(2..=500 / b);
    let mut h = BlockSparseSym::zeros(&vec![b; blocks]);
    let block = |rng: &mut ChaCha8Rng| DMatrix::from_fn(b, b, |_, _| rng.random_range(-1.0..1.0));
    for i in 0..blocks {
        let u = block(rng) + DMatrix::identity(b, b) * 2.0;
        h.add_block(i, i, &row_major(&(u.transpose() * &u)));
        if i + 1 < blocks {
            let (ja, jb) = (block(rng), block(rng));
            h.add_block(i, i, &row_major(&(ja.transpose() * &ja)));
            h.add_block(i, i + 1, &row_major(&(ja.transpose() * &jb)));
            h.add_block(i + 1, i + 1, &row_major(&(jb.transpose() * &jb)));
        }
    }
    h
}

fn criterion_solvers(settings: &Settings, ex: &mut Experiments) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    let mut largest = 0;
    for _ in 0..100 {
        let h = chain_system(&mut rng);
        let n = h.dim();
        largest = largest.max(n);
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let chol = cholesky_solve(&h, &g).map_err(|e| e.to_string())?;
        let cg = cg_solve(&h, &g, 1e-10, None).map_err(|e| e.to_string())?.x;
        let diff: f64 = cg
            .iter()
            .zip(&chol)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(diff / chol.iter().map(|x| x * x).sum::<f64>().sqrt());
    }
    let mut solves = 0usize;
    let mut non_monotone = 0usize;
    for (name, file) in [
        ("disk-compare", "results.csv"),
        ("odom-compare", "results.csv"),
        ("noise-transfer", "cells.csv"),
    ] {
        let (dir, _) = ex.get(settings, name, "a")?;
        for r in read_table(&dir.join(file))? {
            let estimator = r.get("estimator").or_else(|| r.get("eval_context"));
            if estimator.is_some_and(|e| e == "raw") {
                continue;
            }
            solves += field(&r, "n")? as usize;
            non_monotone += field(&r, "non_monotone")? as usize;
        }
    }
    let detail = format!(
        "CG vs Cholesky max relative gap {worst:.1e} (largest system {largest}); \
         {non_monotone} non-monotone LM solves out of {solves}{}",
        settings.note()
    );
    ensure(worst < 1e-6 && non_monotone == 0, || detail.clone())?;
    Ok(detail)
}

// --------------------------------------------------------------------- 10

fn hom(g: &Se2<f64>) -> Matrix3<f64> {
    let [c, s, x, y] = g.to_array();
    Matrix3::new(c, -s, x, s, c, y, 0.0, 0.0, 1.0)
}

fn lie_suite() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    let mut track = |a: &[f64], b: &[f64]| {
        for (x, y) in a.iter().zip(b) {
            worst = worst.max((x - y).abs());
        }
    };
    let kind = ManifoldKind::Se2Ext(2);
    for _ in 0..1000 {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let t = [u(-10.0, 10.0), u(-10.0, 10.0), u(-(PI - 1e-6), PI - 1e-6)];
        let back = Se2::exp(&Twist2::new(t[0], t[1], t[2])).log().to_array();
        track(&back, &t);
        let a = Se2::new(u(-PI, PI), u(-20.0, 20.0), u(-20.0, 20.0));
        let b = Se2::new(u(-PI, PI), u(-20.0, 20.0), u(-20.0, 20.0));
        let c = Se2::new(u(-PI, PI), u(-20.0, 20.0), u(-20.0, 20.0));
        track(
            Se2::exp(&a.log()).to_array().as_slice(),
            a.to_array().as_slice(),
        );
        let m = |g: &Se2<f64>| hom(g).as_slice().to_vec();
        track(
            &m(&a.compose(&b).compose(&c)),
            &m(&a.compose(&b.compose(&c))),
        );
        track(&m(&a.compose(&a.inverse())), Matrix3::identity().as_slice());
        track(&m(&a.compose(&Se2::identity())), &m(&a));
        track(&m(&a.compose(&b)), (hom(&a) * hom(&b)).as_slice());
        let mut x = a.to_array().to_vec();
        x.extend([u(-5.0, 5.0), u(-2.0, 2.0)]);
        let mut y = b.to_array().to_vec();
        y.extend([u(-5.0, 5.0), u(-2.0, 2.0)]);
        let d = vec![t[0], t[1], t[2], u(-5.0, 5.0), u(-5.0, 5.0)];
        track(&kind.ominus(&kind.oplus(&x, &d).unwrap(), &x).unwrap(), &d);
        let to_y = kind.oplus(&x, &kind.ominus(&y, &x).unwrap()).unwrap();
        track(
            &m(&Se2::from_slice(&to_y[..4])),
            &m(&Se2::from_slice(&y[..4])),
        );
        track(&to_y[4..], &y[4..]);
    }
    let detail = format!("1000 samples, max deviation {worst:.1e}");
    ensure(worst < 1e-10, || detail.clone())?;
    Ok(detail)
}

// --------------------------------------------------------------------- 11

fn criterion_determinism(settings: &Settings, ex: &mut Experiments) -> Verdict {
    let (a, _) = ex.get(settings, "noise-transfer", "a")?;
    let (b, _) = ex.get(settings, "noise-transfer", "b")?;
    let mut names: Vec<String> = fs::read_dir(&a)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv") || n.ends_with(".jsonl"))
        .collect();
    names.sort();
    let mut differing = Vec::new();
    for n in &names {
        let (x, y) = (fs::read(a.join(n)), fs::read(b.join(n)));
        if x.is_err() || y.is_err() || x.ok() != y.ok() {
            differing.push(n.clone());
        }
    }
    let detail = format!(
        "{} CSV and dataset files compared, {} differ{}",
        names.len(),
        differing.len(),
        settings.note()
    );
    ensure(differing.is_empty() && !names.is_empty(), || {
        format!("{detail}: {differing:?}")
    })?;
    Ok(detail)
}
