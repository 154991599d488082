//! Bundled experiments.
//!
//! * `disk-compare` and `odom-compare`: every combination of loss, noise
//!   model and estimator, trained and evaluated per held-out fold.
//! * `noise-transfer`: noise models trained through the filter or the
//!   smoother, each evaluated with both, over several dataset seeds.
//!
//! Cells run on up to `experiment.jobs` threads; results are collected in
//! cell order so the output does not depend on scheduling.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use smoothlearn::factors::{Model, ModelSpec, NoiseKind, Task, DISK_FULL_PIXELS};
use smoothlearn::learn::{train, LossKind, TrainConfig, TrainOutcome};
use smoothlearn::solve::SolverConfig;
use smoothlearn::tasks::{
    estimate, evaluate, metric_names, Estimator, MeanSe, MetricReport, TrajectoryDataset,
};

use crate::config::RunConfig;
use crate::output::{
    bar_chart, line_chart, num, write_csv, write_run_manifest, write_text, Bar, Series,
};
use crate::{CliError, ExperimentName};

/// Runs `cells` on up to `jobs` threads and returns their results in order.
pub fn run_parallel<'a, T: Send>(
    jobs: usize,
    cells: Vec<Box<dyn FnOnce() -> T + Send + 'a>>,
) -> Vec<T> {
    let n = cells.len();
    let queue: Vec<Mutex<Option<Box<dyn FnOnce() -> T + Send + 'a>>>> =
        cells.into_iter().map(|c| Mutex::new(Some(c))).collect();
    let results: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let cell = queue[i]
                    .lock()
                    .expect("queue lock")
                    .take()
                    .expect("cell runs once");
                *results[i].lock().expect("result lock") = Some(cell());
            });
        }
    });
    results
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("result lock")
                .expect("every cell ran")
        })
        .collect()
}

pub fn cmd_experiment(name: ExperimentName, cfg: &RunConfig) -> Result<(), CliError> {
    let started = Instant::now();
    let failed = match name {
        ExperimentName::DiskCompare => compare(cfg, Task::Disk, name)?,
        ExperimentName::OdomCompare => compare(cfg, Task::Odom2d, name)?,
        ExperimentName::NoiseTransfer => noise_transfer(cfg)?,
    };
    eprintln!(
        "{} finished in {:.1} s; results in {}",
        name.as_str(),
        started.elapsed().as_secs_f64(),
        cfg.out_dir().display()
    );
    if failed > 0 {
        return Err(CliError::Partial(format!(
            "{failed} experiment cells failed or were incomplete"
        )));
    }
    Ok(())
}

/// A trained model and its evaluations.
struct CellOutput {
    model: Model,
    outcome: TrainOutcome,
    reports: Vec<MetricReport>,
    /// Position tracks of the first test record, one per estimator.
    tracks: Vec<Vec<[f64; 2]>>,
}

fn noise_str(n: NoiseKind) -> &'static str {
    n.as_str()
}

fn position_range(task: Task) -> std::ops::Range<usize> {
    match task {
        Task::Disk => 0..2,
        Task::Odom2d => 2..4,
    }
}

fn train_cell(
    ds: &TrajectoryDataset,
    fold: usize,
    noise: NoiseKind,
    config: &TrainConfig,
    estimators: &[Estimator],
    seed: u64,
) -> Result<CellOutput, String> {
    let task = ds.task();
    let (train_set, test_set) = ds.split(fold);
    let origin = ds.header.generator.sensor_origin();
    let mut model = Model::init(ModelSpec::new(task, noise), seed).map_err(|e| e.to_string())?;
    let config = TrainConfig {
        seed,
        ..config.clone()
    };
    let outcome =
        train(&mut model, &train_set, &origin, &config, None).map_err(|e| e.to_string())?;
    let solver = SolverConfig::evaluation();
    let mut reports = Vec::new();
    let mut tracks = Vec::new();
    for &est in estimators {
        reports.push(evaluate(&model, &test_set, &origin, est, &solver));
        let track = match test_set.first() {
            Some(r) => estimate(&model, r, &origin, est, &solver)
                .map(|e| {
                    e.x.iter()
                        .map(|s| {
                            let p = &s[position_range(task)];
                            [p[0], p[1]]
                        })
                        .collect()
                })
                .unwrap_or_default(),
            None => Vec::new(),
        };
        tracks.push(track);
    }
    Ok(CellOutput {
        model,
        outcome,
        reports,
        tracks,
    })
}

fn report_status(r: &MetricReport) -> String {
    if r.values.is_empty() {
        "failed: no record evaluated".into()
    } else if !r.failures.is_empty() {
        format!("partial: {} records failed", r.failures.len())
    } else {
        "ok".into()
    }
}

fn report_means(r: &MetricReport) -> Vec<f64> {
    if r.values.is_empty() {
        vec![f64::NAN; r.names().len()]
    } else {
        r.mean()
    }
}

fn generate(
    cfg: &RunConfig,
    task: Task,
    records: usize,
    seed: u64,
) -> Result<TrajectoryDataset, CliError> {
    if records < 2 {
        return Err(CliError::Config(
            "experiments need at least 2 records".into(),
        ));
    }
    Ok(TrajectoryDataset::generate(
        cfg.generator_for(task)?,
        records,
        seed,
    ))
}

/// Feature grid for the emitted-variance curves.
fn feature_grid(task: Task) -> Vec<f64> {
    match task {
        Task::Disk => (0..=DISK_FULL_PIXELS as usize).map(|f| f as f64).collect(),
        Task::Odom2d => (0..=100).map(|q| q as f64 / 100.0).collect(),
    }
}

struct Training {
    loss: LossKind,
    noise: NoiseKind,
    estimators: &'static [Estimator],
}

const COMPARE_TRAININGS: &[Training] = &[
    Training {
        loss: LossKind::SurrogateMse,
        noise: NoiseKind::Constant,
        estimators: &[Estimator::Smoother],
    },
    Training {
        loss: LossKind::SurrogateMse,
        noise: NoiseKind::Heteroscedastic,
        estimators: &[Estimator::Smoother],
    },
    Training {
        loss: LossKind::FilterMse,
        noise: NoiseKind::Constant,
        estimators: &[Estimator::Filter],
    },
    Training {
        loss: LossKind::FilterMse,
        noise: NoiseKind::Heteroscedastic,
        estimators: &[Estimator::Filter],
    },
    // the joint NLL fit is estimator-agnostic; its sensor is also the raw
    // virtual-sensor baseline
    Training {
        loss: LossKind::JointNll,
        noise: NoiseKind::Constant,
        estimators: &[Estimator::Smoother, Estimator::Filter, Estimator::Raw],
    },
    Training {
        loss: LossKind::JointNll,
        noise: NoiseKind::Heteroscedastic,
        estimators: &[Estimator::Smoother, Estimator::Filter],
    },
];

/// Returns the number of failed or incomplete cells.
fn compare(cfg: &RunConfig, task: Task, name: ExperimentName) -> Result<usize, CliError> {
    let key = match task {
        Task::Disk => "disk_compare",
        Task::Odom2d => "odom_compare",
    };
    let records = cfg.usize(&format!("{key}.records"));
    let n_folds = cfg.usize(&format!("{key}.folds"));
    let base = cfg.train_config(task)?;
    let seed = cfg.seed();
    let out = cfg.out_dir();
    let ds = generate(cfg, task, records, seed)?;
    if n_folds == 0 || n_folds > ds.header.folds {
        return Err(CliError::Config(format!(
            "{key}.folds must lie in 1..={}",
            ds.header.folds
        )));
    }
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let data = out.join("dataset.jsonl");
    ds.write(&data)?;
    write_run_manifest(
        &out,
        &format!("experiment {}", name.as_str()),
        cfg,
        &[&data],
    )?;

    let mut specs = Vec::new();
    for fold in 0..n_folds {
        for t in COMPARE_TRAININGS {
            specs.push((fold, t));
        }
    }
    let total = specs.len();
    let done = AtomicUsize::new(0);
    let cells: Vec<Box<dyn FnOnce() -> Result<CellOutput, String> + Send + '_>> = specs
        .iter()
        .map(|&(fold, t)| {
            let (ds, base, done) = (&ds, &base, &done);
            Box::new(move || {
                let t0 = Instant::now();
                let config = TrainConfig {
                    loss: t.loss,
                    ..base.clone()
                };
                let r = train_cell(
                    ds,
                    fold,
                    t.noise,
                    &config,
                    t.estimators,
                    seed.wrapping_add(fold as u64),
                );
                let k = done.fetch_add(1, Ordering::Relaxed) + 1;
                eprintln!(
                    "[{k}/{total}] fold {fold} {} {}: {} ({:.1} s)",
                    t.loss.as_str(),
                    noise_str(t.noise),
                    if r.is_ok() { "done" } else { "FAILED" },
                    t0.elapsed().as_secs_f64()
                );
                r
            }) as Box<dyn FnOnce() -> Result<CellOutput, String> + Send + '_>
        })
        .collect();
    let results = run_parallel(cfg.usize("experiment.jobs"), cells);

    let names = metric_names(task);
    let mut header = vec![
        "estimator",
        "noise",
        "loss",
        "fold",
        "n",
        "failures",
        "stalled",
        "non_monotone",
    ];
    header.extend(names.iter().copied());
    header.push("status");
    let mut rows = Vec::new();
    let mut failed = 0;
    // (training, estimator) -> per-fold metric means
    let mut groups: BTreeMap<(usize, usize), Vec<Vec<f64>>> = BTreeMap::new();
    let mut variance_rows = Vec::new();
    let mut curves: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    let mut training_rows = Vec::new();
    let mut track_rows = Vec::new();
    let grid = feature_grid(task);
    for (&(fold, t), result) in specs.iter().zip(&results) {
        let ti = COMPARE_TRAININGS
            .iter()
            .position(|x| std::ptr::eq(x, t))
            .expect("training from the table");
        for (ei, &est) in t.estimators.iter().enumerate() {
            let (noise, loss) = if est == Estimator::Raw {
                ("-", "-")
            } else {
                (noise_str(t.noise), t.loss.as_str())
            };
            let gkey = (ti, ei);
            let mut row = vec![
                est.as_str().to_string(),
                noise.to_string(),
                loss.to_string(),
                fold.to_string(),
            ];
            match result {
                Ok(c) => {
                    let r = &c.reports[ei];
                    let status = report_status(r);
                    failed += usize::from(status != "ok");
                    row.extend([
                        r.values.len().to_string(),
                        r.failures.len().to_string(),
                        r.stalled.to_string(),
                        r.non_monotone.to_string(),
                    ]);
                    let means = report_means(r);
                    row.extend(means.iter().map(|x| num(*x)));
                    row.push(status);
                    if !r.values.is_empty() {
                        groups.entry(gkey).or_default().push(means);
                    }
                }
                Err(e) => {
                    failed += 1;
                    row.extend(["0", "", "", ""].map(String::from));
                    row.extend(names.iter().map(|_| String::new()));
                    row.push(format!("failed: {e}"));
                    groups.entry(gkey).or_default();
                }
            }
            rows.push(row);
        }
        let Ok(c) = result else { continue };
        for e in &c.outcome.epochs {
            training_rows.push(vec![
                t.loss.as_str().to_string(),
                noise_str(t.noise).to_string(),
                fold.to_string(),
                e.epoch.to_string(),
                num(e.loss),
                num(e.grad_norm),
            ]);
        }
        let mut curve = Vec::with_capacity(grid.len());
        for &f in &grid {
            let Ok(sp) = c.model.sensor_sqrt_prec(f) else {
                curve.push(f64::NAN);
                continue;
            };
            let heads = c.model.spec.head_outputs();
            for (ch, s) in sp.iter().take(heads).enumerate() {
                let var = 1.0 / (s * s);
                variance_rows.push(vec![
                    t.loss.as_str().to_string(),
                    noise_str(t.noise).to_string(),
                    fold.to_string(),
                    num(f),
                    ch.to_string(),
                    num(var),
                ]);
            }
            curve.push(1.0 / (sp[0] * sp[0]));
        }
        curves.entry(ti).or_default().push(curve);
        if fold == 0 {
            for (ei, &est) in t.estimators.iter().enumerate() {
                for (step, p) in c.tracks[ei].iter().enumerate() {
                    track_rows.push(vec![
                        format!(
                            "{}/{}/{}",
                            est.as_str(),
                            noise_str(t.noise),
                            t.loss.as_str()
                        ),
                        step.to_string(),
                        num(p[0]),
                        num(p[1]),
                    ]);
                }
            }
        }
    }
    if let Some(r) = ds.fold(0).first() {
        for (step, s) in r.states.iter().enumerate() {
            let p = &s[position_range(task)];
            track_rows.push(vec![
                "ground-truth".to_string(),
                step.to_string(),
                num(p[0]),
                num(p[1]),
            ]);
        }
    }
    write_csv(&out.join("results.csv"), &header, &rows)?;

    // summary over folds
    let mut sum_header = vec!["estimator", "noise", "loss", "folds"];
    let cols: Vec<String> = names
        .iter()
        .flat_map(|m| [format!("{m}_mean"), format!("{m}_se")])
        .collect();
    sum_header.extend(cols.iter().map(String::as_str));
    sum_header.push("status");
    let mut summary = Vec::new();
    let mut bars = Vec::new();
    for (ti, t) in COMPARE_TRAININGS.iter().enumerate() {
        for (ei, &est) in t.estimators.iter().enumerate() {
            let (noise, loss) = if est == Estimator::Raw {
                ("-", "-")
            } else {
                (noise_str(t.noise), t.loss.as_str())
            };
            let folds = groups.get(&(ti, ei)).cloned().unwrap_or_default();
            let mut row = vec![
                est.as_str().to_string(),
                noise.to_string(),
                loss.to_string(),
                folds.len().to_string(),
            ];
            let stats: Vec<MeanSe> = (0..names.len())
                .map(|k| MeanSe::of(&folds.iter().map(|v| v[k]).collect::<Vec<_>>()))
                .collect();
            for s in &stats {
                row.extend([num(s.mean), num(s.se)]);
            }
            row.push(
                if folds.len() == n_folds {
                    "ok"
                } else {
                    "incomplete"
                }
                .to_string(),
            );
            summary.push(row);
            bars.push(Bar {
                label: format!("{} {} {}", est.as_str(), noise, loss),
                value: stats[0].mean,
                err: stats[0].se,
            });
        }
    }
    write_csv(&out.join("summary.csv"), &sum_header, &summary)?;
    write_text(
        &out.join("summary.svg"),
        &bar_chart(
            &format!(
                "{}: held-out {} (mean ± SE over folds)",
                name.as_str(),
                names[0]
            ),
            names[0],
            &bars,
        ),
    )?;
    write_csv(
        &out.join("training.csv"),
        &["loss", "noise", "fold", "epoch", "loss_value", "grad_norm"],
        &training_rows,
    )?;
    write_csv(
        &out.join("variance.csv"),
        &["loss", "noise", "fold", "feature", "channel", "variance"],
        &variance_rows,
    )?;
    let series: Vec<Series> = curves
        .iter()
        .map(|(&ti, per_fold)| {
            let t = &COMPARE_TRAININGS[ti];
            let points = grid
                .iter()
                .enumerate()
                .map(|(i, &f)| {
                    let m = per_fold.iter().map(|c| c[i]).sum::<f64>() / per_fold.len() as f64;
                    (f, m)
                })
                .collect();
            Series {
                label: format!("{} {}", t.loss.as_str(), noise_str(t.noise)),
                points,
            }
        })
        .collect();
    let feature_label = match task {
        Task::Disk => "visible tracked pixels",
        Task::Odom2d => "reported sensor quality",
    };
    write_text(
        &out.join("variance.svg"),
        &line_chart(
            "emitted measurement variance (mean over folds)",
            feature_label,
            "variance",
            &series,
            true,
        ),
    )?;
    write_csv(
        &out.join("trajectories.csv"),
        &["model", "t", "x", "y"],
        &track_rows,
    )?;
    print_summary(&summary, &sum_header);
    Ok(failed)
}

fn print_summary(rows: &[Vec<String>], header: &[&str]) {
    println!("{}", header.join("\t"));
    for r in rows {
        let cells: Vec<String> = r
            .iter()
            .map(|c| match c.parse::<f64>() {
                Ok(x) if c.contains('.') || c.contains('e') => format!("{x:.5}"),
                _ => c.clone(),
            })
            .collect();
        println!("{}", cells.join("\t"));
    }
}

/// Training contexts of the transfer table, in row order.
const TRANSFER_CONTEXTS: [(LossKind, Estimator); 2] = [
    (LossKind::FilterMse, Estimator::Filter),
    (LossKind::SurrogateMse, Estimator::Smoother),
];
const TRANSFER_EVALS: [Estimator; 2] = [Estimator::Filter, Estimator::Smoother];

fn noise_transfer(cfg: &RunConfig) -> Result<usize, CliError> {
    let task = Task::Odom2d;
    let records = cfg.usize("noise_transfer.records");
    let n_seeds = cfg.usize("noise_transfer.seeds");
    if n_seeds == 0 {
        return Err(CliError::Config(
            "noise_transfer.seeds must be positive".into(),
        ));
    }
    let base = cfg.train_config(task)?;
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let mut datasets = Vec::new();
    let mut paths = Vec::new();
    for i in 0..n_seeds {
        let seed = cfg.seed().wrapping_add(i as u64);
        let ds = generate(cfg, task, records, seed)?;
        let p = out.join(format!("dataset_seed{seed}.jsonl"));
        ds.write(&p)?;
        datasets.push((seed, ds));
        paths.push(p);
    }
    let path_refs: Vec<&Path> = paths.iter().map(|p| p.as_path()).collect();
    write_run_manifest(&out, "experiment noise-transfer", cfg, &path_refs)?;

    let specs: Vec<(usize, usize)> = (0..n_seeds)
        .flat_map(|i| (0..TRANSFER_CONTEXTS.len()).map(move |c| (i, c)))
        .collect();
    let total = specs.len();
    let done = AtomicUsize::new(0);
    let cells: Vec<Box<dyn FnOnce() -> Result<CellOutput, String> + Send + '_>> = specs
        .iter()
        .map(|&(i, c)| {
            let (datasets, base, done) = (&datasets, &base, &done);
            Box::new(move || {
                let t0 = Instant::now();
                let (seed, ds) = &datasets[i];
                let config = TrainConfig {
                    loss: TRANSFER_CONTEXTS[c].0,
                    ..base.clone()
                };
                let r = train_cell(
                    ds,
                    0,
                    NoiseKind::Heteroscedastic,
                    &config,
                    &TRANSFER_EVALS,
                    *seed,
                );
                let k = done.fetch_add(1, Ordering::Relaxed) + 1;
                eprintln!(
                    "[{k}/{total}] seed {seed} trained through {}: {} ({:.1} s)",
                    TRANSFER_CONTEXTS[c].1.as_str(),
                    if r.is_ok() { "done" } else { "FAILED" },
                    t0.elapsed().as_secs_f64()
                );
                r
            }) as Box<dyn FnOnce() -> Result<CellOutput, String> + Send + '_>
        })
        .collect();
    let results = run_parallel(cfg.usize("experiment.jobs"), cells);

    let names = metric_names(task);
    let mut header = vec![
        "seed",
        "train_context",
        "eval_context",
        "n",
        "failures",
        "stalled",
        "non_monotone",
    ];
    header.extend(names.iter().copied());
    header.push("status");
    let mut rows = Vec::new();
    let mut failed = 0;
    // [train][eval] -> per-seed metric means
    let mut table: Vec<Vec<Vec<Vec<f64>>>> = vec![vec![Vec::new(); 2]; 2];
    for (&(i, c), result) in specs.iter().zip(&results) {
        let seed = datasets[i].0;
        for (e, est) in TRANSFER_EVALS.iter().enumerate() {
            let mut row = vec![
                seed.to_string(),
                TRANSFER_CONTEXTS[c].1.as_str().to_string(),
                est.as_str().to_string(),
            ];
            match result {
                Ok(cell) => {
                    let r = &cell.reports[e];
                    let status = report_status(r);
                    failed += usize::from(status != "ok");
                    row.extend([
                        r.values.len().to_string(),
                        r.failures.len().to_string(),
                        r.stalled.to_string(),
                        r.non_monotone.to_string(),
                    ]);
                    let means = report_means(r);
                    row.extend(means.iter().map(|x| num(*x)));
                    row.push(status);
                    table[c][e].push(means);
                }
                Err(msg) => {
                    failed += 1;
                    row.extend(["0", "", "", ""].map(String::from));
                    row.extend(names.iter().map(|_| String::new()));
                    row.push(format!("failed: {msg}"));
                }
            }
            rows.push(row);
        }
    }
    write_csv(&out.join("cells.csv"), &header, &rows)?;

    let mut t_header = vec!["train_context", "seeds"];
    let cols: Vec<String> = names
        .iter()
        .flat_map(|m| {
            TRANSFER_EVALS
                .iter()
                .map(move |e| format!("{}_{m}", e.as_str()))
        })
        .collect();
    t_header.extend(cols.iter().map(String::as_str));
    let mut t_rows = Vec::new();
    let mut bars = Vec::new();
    for (c, (_, ctx)) in TRANSFER_CONTEXTS.iter().enumerate() {
        let seeds = table[c].iter().map(Vec::len).min().unwrap_or(0);
        let mut row = vec![ctx.as_str().to_string(), seeds.to_string()];
        for k in 0..names.len() {
            for (e, est) in TRANSFER_EVALS.iter().enumerate() {
                let vals: Vec<f64> = table[c][e].iter().map(|v| v[k]).collect();
                let m = if vals.is_empty() {
                    f64::NAN
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                };
                row.push(num(m));
                if k == 0 {
                    bars.push(Bar {
                        label: format!("train {} / eval {}", ctx.as_str(), est.as_str()),
                        value: m,
                        err: MeanSe::of(&vals).se,
                    });
                }
            }
        }
        t_rows.push(row);
    }
    write_csv(&out.join("table.csv"), &t_header, &t_rows)?;
    write_text(
        &out.join("table.svg"),
        &bar_chart("noise-model transfer (mean over seeds)", names[0], &bars),
    )?;
    print_summary(&t_rows, &t_header);
    Ok(failed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_results_keep_cell_order() {
        let cells: Vec<Box<dyn FnOnce() -> usize + Send>> = (0..17usize)
            .map(|i| Box::new(move || i * i) as Box<dyn FnOnce() -> usize + Send>)
            .collect();
        let out = run_parallel(4, cells);
        assert_eq!(out, (0..17).map(|i| i * i).collect::<Vec<_>>());
        assert!(run_parallel::<usize>(3, Vec::new()).is_empty());
    }
}
