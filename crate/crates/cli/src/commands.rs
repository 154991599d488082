//! `gen`, `train` and `eval`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use smoothlearn::factors::{Model, ModelSpec, Task};
use smoothlearn::learn::{read_checkpoint, train, write_checkpoint, LossKind, TrainOutcome};
use smoothlearn::solve::SolverConfig;
use smoothlearn::tasks::{
    evaluate, metric_names, Estimator, MeanSe, MetricReport, Record, TrajectoryDataset,
};

use crate::config::RunConfig;
use crate::output::{num, write_csv, write_run_manifest, write_text};
use crate::CliError;

pub fn dataset_path(cfg: &RunConfig) -> PathBuf {
    cfg.path_or("data.path", "dataset.jsonl")
}

pub fn load_dataset(path: &Path) -> Result<TrajectoryDataset, CliError> {
    if !path.exists() {
        return Err(CliError::io(path, "dataset not found (run `gen` first)"));
    }
    Ok(TrajectoryDataset::read(path)?)
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<(), CliError> {
    let generator = cfg.generator()?;
    let n = cfg.usize("data.records");
    if n == 0 {
        return Err(CliError::Config("data.records must be positive".into()));
    }
    let out = cfg.out_dir();
    let ds = TrajectoryDataset::generate(generator, n, cfg.seed());
    let path = dataset_path(cfg);
    ds.write(&path)?;
    let rows: Vec<Vec<String>> = ds
        .records
        .iter()
        .map(|r| vec![r.index.to_string(), r.fold.to_string()])
        .collect();
    write_csv(&out.join("folds.csv"), &["record", "fold"], &rows)?;
    let frames = cfg.usize("data.frames");
    if frames > 0 {
        if ds.task() != Task::Disk {
            return Err(CliError::Config(
                "data.frames applies to the disk task only".into(),
            ));
        }
        ds.dump_disk_frames(&out, frames)?;
    }
    write_run_manifest(&out, "gen", cfg, &[])?;
    println!(
        "wrote {} {} records ({} folds) to {}",
        n,
        ds.task().as_str(),
        ds.header.folds,
        path.display()
    );
    Ok(())
}

fn check_fold(ds: &TrajectoryDataset, fold: usize) -> Result<(), CliError> {
    if fold >= ds.header.folds {
        return Err(CliError::Config(format!(
            "fold {fold} out of range (dataset has {} folds)",
            ds.header.folds
        )));
    }
    Ok(())
}

/// Estimator matching a training loss.
pub fn training_context(loss: LossKind) -> Estimator {
    match loss {
        LossKind::FilterMse => Estimator::Filter,
        LossKind::SurrogateMse | LossKind::JointNll => Estimator::Smoother,
    }
}

pub fn epochs_rows(outcome: &TrainOutcome) -> Vec<Vec<String>> {
    outcome
        .epochs
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                num(e.loss),
                num(e.grad_norm),
                e.val_metric.map(num).unwrap_or_default(),
            ]
        })
        .collect()
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let data = dataset_path(cfg);
    let ds = load_dataset(&data)?;
    let task = ds.task();
    let fold = cfg.usize("train.fold");
    check_fold(&ds, fold)?;
    let tc = cfg.train_config(task)?;
    let out = cfg.out_dir();
    write_run_manifest(&out, "train", cfg, &[&data])?;
    let (train_set, test_set) = ds.split(fold);
    let origin = ds.header.generator.sensor_origin();
    let mut model = Model::init(ModelSpec::new(task, cfg.noise()), cfg.seed())?;
    let validation = cfg
        .bool("train.validate")
        .then_some((test_set.as_slice(), training_context(tc.loss)));
    let outcome = train(&mut model, &train_set, &origin, &tc, validation)?;
    let ckpt = cfg.path_or("train.checkpoint", "model.ckpt");
    write_checkpoint(&model.params, &ckpt)?;
    write_csv(
        &out.join("epochs.csv"),
        &["epoch", "loss", "grad_norm", "val_metric"],
        &epochs_rows(&outcome),
    )?;
    let batches: Vec<Vec<String>> = outcome
        .report
        .batches
        .iter()
        .map(|b| {
            vec![
                b.epoch.to_string(),
                b.batch.to_string(),
                num(b.loss),
                num(b.grad_norm),
            ]
        })
        .collect();
    write_csv(
        &out.join("batches.csv"),
        &["epoch", "batch", "loss", "grad_norm"],
        &batches,
    )?;
    let mut summary = String::new();
    let r = &outcome.report;
    let _ = writeln!(summary, "final batch loss: {}", r.loss);
    let _ = writeln!(summary, "final batch gradient norm: {}", r.grad_norm);
    for (name, n) in &r.slice_norms {
        let _ = writeln!(summary, "  {name}: {n}");
    }
    write_text(&out.join("gradient_report.txt"), &summary)?;
    match outcome.epochs.last() {
        Some(e) => println!(
            "trained {} epochs ({}, {}): loss {:.6}, checkpoint {}",
            outcome.epochs.len(),
            tc.loss.as_str(),
            model.spec.noise.as_str(),
            e.loss,
            ckpt.display()
        ),
        None => println!("0 epochs: wrote initialization to {}", ckpt.display()),
    }
    Ok(())
}

fn parse_folds(spec: &str, folds: usize) -> Result<Vec<usize>, CliError> {
    if spec == "all" {
        return Ok((0..folds).collect());
    }
    let list = spec
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Config(format!("eval.folds = {spec:?}: {e}")))?;
    if let Some(k) = list.iter().find(|&&k| k >= folds) {
        return Err(CliError::Config(format!(
            "fold {k} out of range (dataset has {folds} folds)"
        )));
    }
    Ok(list)
}

/// Columns `<metric>_mean, <metric>_se` for every metric of a report.
pub fn metric_columns(task: Task) -> Vec<String> {
    metric_names(task)
        .iter()
        .flat_map(|m| [format!("{m}_mean"), format!("{m}_se")])
        .collect()
}

/// Mean and standard error per metric over the records of a report.
pub fn report_stats(report: &MetricReport) -> Vec<MeanSe> {
    (0..report.names().len())
        .map(|k| MeanSe::of(&report.values.iter().map(|v| v[k]).collect::<Vec<_>>()))
        .collect()
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let data = dataset_path(cfg);
    let ds = load_dataset(&data)?;
    let task = ds.task();
    let estimator = cfg.estimator();
    let ckpt = cfg.path_or("eval.checkpoint", "model.ckpt");
    let needs_model = matches!(estimator, Estimator::Smoother | Estimator::Filter);
    let mut inputs = vec![data.as_path()];
    let model = if ckpt.exists() {
        inputs.push(&ckpt);
        let m = Model::detect(read_checkpoint(&ckpt)?)?;
        if m.task() != task {
            return Err(CliError::Config(format!(
                "checkpoint is a {} model, dataset is {}",
                m.task().as_str(),
                task.as_str()
            )));
        }
        m
    } else if needs_model {
        return Err(CliError::io(&ckpt, "missing checkpoint"));
    } else {
        // identity virtual sensor
        Model::init(ModelSpec::new(task, cfg.noise()), 0)?
    };
    let folds = parse_folds(cfg.str("eval.folds"), ds.header.folds)?;
    let out = cfg.out_dir();
    write_run_manifest(&out, "eval", cfg, &inputs)?;
    let origin = ds.header.generator.sensor_origin();
    let solver = SolverConfig::evaluation();
    let names = metric_names(task);
    let mut header: Vec<String> = ["fold", "n", "failures", "stalled", "non_monotone"]
        .map(String::from)
        .to_vec();
    header.extend(metric_columns(task));
    let mut rows = Vec::new();
    let mut record_rows = Vec::new();
    let mut fold_means: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    let mut all_values: Vec<Vec<f64>> = Vec::new();
    let mut failures = 0;
    for &k in &folds {
        let recs = ds.fold(k);
        let report = evaluate(&model, &recs, &origin, estimator, &solver);
        failures += report.failures.len();
        let mut row = vec![
            k.to_string(),
            report.values.len().to_string(),
            report.failures.len().to_string(),
            report.stalled.to_string(),
            report.non_monotone.to_string(),
        ];
        for (i, s) in report_stats(&report).iter().enumerate() {
            row.extend([num(s.mean), num(s.se)]);
            fold_means[i].push(s.mean);
        }
        rows.push(row);
        let ok: Vec<&&Record> = recs
            .iter()
            .filter(|r| !report.failures.iter().any(|(i, _)| *i == r.index))
            .collect();
        for (r, v) in ok.iter().zip(&report.values) {
            let mut row = vec![k.to_string(), r.index.to_string()];
            row.extend(v.iter().map(|x| num(*x)));
            record_rows.push(row);
        }
        all_values.extend(report.values);
    }
    // across folds when there are several, across records otherwise
    let overall: Vec<MeanSe> = if folds.len() > 1 {
        fold_means.iter().map(|m| MeanSe::of(m)).collect()
    } else {
        (0..names.len())
            .map(|k| MeanSe::of(&all_values.iter().map(|v| v[k]).collect::<Vec<_>>()))
            .collect()
    };
    let mut row = vec![
        "all".to_string(),
        all_values.len().to_string(),
        failures.to_string(),
        String::new(),
        String::new(),
    ];
    for s in &overall {
        row.extend([num(s.mean), num(s.se)]);
    }
    rows.push(row);
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&out.join("metrics.csv"), &header_refs, &rows)?;
    let mut rec_header = vec!["fold", "record"];
    rec_header.extend(names.iter().copied());
    write_csv(&out.join("metrics_records.csv"), &rec_header, &record_rows)?;

    let mut table = format!(
        "{} on {} ({} records)\n",
        estimator.as_str(),
        task.as_str(),
        all_values.len()
    );
    for (name, s) in names.iter().zip(&overall) {
        let _ = writeln!(table, "  {name:<16} {:.6} ± {:.6}", s.mean, s.se);
    }
    if failures > 0 {
        let _ = writeln!(table, "  {failures} records failed");
    }
    write_text(&out.join("metrics.txt"), &table)?;
    print!("{table}");
    if failures > 0 {
        return Err(CliError::Partial(format!(
            "{failures} records failed to evaluate"
        )));
    }
    Ok(())
}
