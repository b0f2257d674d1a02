//! `run`: every (method, seed) pair of an experiment, and the files each run
//! leaves in `<output_dir>/<method>/<seed>/`.
//!
//! | file | content |
//! |------|---------|
//! | `run.json` | method, seed and layout of the run |
//! | `reports/task_<t>.json` | [`EvalReport`] after task `t` |
//! | `metrics.csv` | one row per task, header [`METRICS_HEADER`] |
//! | `confusion.csv` | task confusion counts, header [`CONFUSION_HEADER`] |
//! | `task_ratio.csv` | previous-model task histogram on new data, header [`TASK_RATIO_HEADER`] |
//! | `train_log.jsonl` | one JSON object per epoch |
//! | `checkpoint.json` | final model and exemplar memory |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cli::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{EvalReport, REPORT_SCHEMA_VERSION};
use crate::model::Checkpoint;
use crate::trainer::{run_incremental, Method, NoObserver, RunState};

pub const METRICS_HEADER: [&str; 10] = [
    "method",
    "seed",
    "task",
    "top1",
    "topk",
    "k",
    "avg_top1",
    "avg_topk",
    "old_to_latest",
    "old_in_latest",
];
pub const CONFUSION_HEADER: [&str; 4] = ["after_task", "true_task", "predicted_task", "count"];
pub const TASK_RATIO_HEADER: [&str; 3] = ["task", "old_task", "ratio"];

/// Identity of one run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub schema_version: u32,
    pub method: Method,
    pub seed: u64,
    pub tasks: usize,
    pub classes_per_task: usize,
}

pub fn run_dir(output_dir: &Path, method: Method, seed: u64) -> PathBuf {
    output_dir.join(method.as_str()).join(seed.to_string())
}

fn report_path(dir: &Path, t: usize) -> PathBuf {
    dir.join("reports").join(format!("task_{t}.json"))
}

/// Tasks are 1-based, old tasks in the CSVs too.
pub fn metrics_csv(meta: &RunMeta, reports: &[EvalReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    let (mut sum1, mut sumk) = (0.0, 0.0);
    for (i, r) in reports.iter().enumerate() {
        sum1 += r.top1;
        sumk += r.topk;
        let n = (i + 1) as f64;
        let (to_latest, in_latest) = if r.after_task >= 2 {
            (
                r.old_to_latest_fraction().to_string(),
                r.old_samples_in_latest_task().to_string(),
            )
        } else {
            (String::new(), String::new())
        };
        w.write_record([
            meta.method.as_str().to_string(),
            meta.seed.to_string(),
            r.after_task.to_string(),
            r.top1.to_string(),
            r.topk.to_string(),
            r.k.to_string(),
            (sum1 / n).to_string(),
            (sumk / n).to_string(),
            to_latest,
            in_latest,
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn confusion_csv(reports: &[EvalReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CONFUSION_HEADER)?;
    for r in reports {
        for (i, row) in r.task_confusion.iter().enumerate() {
            for (j, n) in row.iter().enumerate() {
                w.write_record([
                    r.after_task.to_string(),
                    (i + 1).to_string(),
                    (j + 1).to_string(),
                    n.to_string(),
                ])?;
            }
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn task_ratio_csv(reports: &[EvalReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TASK_RATIO_HEADER)?;
    for r in reports {
        for (i, v) in r.new_data_task_ratio.iter().flatten().enumerate() {
            w.write_record([r.after_task.to_string(), (i + 1).to_string(), v.to_string()])?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Writes the three CSV renderings of `reports` into `dir`.
pub fn write_tables(dir: &Path, meta: &RunMeta, reports: &[EvalReport]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(meta, reports)?)?;
    fs::write(dir.join("confusion.csv"), confusion_csv(reports)?)?;
    fs::write(dir.join("task_ratio.csv"), task_ratio_csv(reports)?)?;
    Ok(())
}

fn write_run(dir: &Path, meta: &RunMeta, state: &RunState, complete: bool) -> Result<()> {
    fs::create_dir_all(dir.join("reports"))?;
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(meta)?)?;
    for r in &state.reports {
        fs::write(report_path(dir, r.after_task), serde_json::to_string_pretty(r)?)?;
    }
    write_tables(dir, meta, &state.reports)?;
    let mut log = Vec::new();
    for rec in &state.log {
        serde_json::to_writer(&mut log, rec)?;
        log.push(b'\n');
    }
    fs::write(dir.join("train_log.jsonl"), log)?;
    if complete {
        Checkpoint {
            model: state.model.clone(),
            memory: Some(state.memory.clone()),
        }
        .save(&dir.join("checkpoint.json"))?;
    }
    Ok(())
}

/// Reads the metadata and all per-task reports of a run directory.
pub fn load_run(dir: &Path) -> Result<(RunMeta, Vec<EvalReport>)> {
    let bad = |message: String| Error::RunDir {
        path: dir.to_path_buf(),
        message,
    };
    let meta: RunMeta = fs::read_to_string(dir.join("run.json"))
        .map_err(|e| bad(format!("run.json: {e}")))
        .and_then(|t| serde_json::from_str(&t).map_err(|e| bad(format!("run.json: {e}"))))?;
    let mut reports = Vec::with_capacity(meta.tasks);
    for t in 1..=meta.tasks {
        let path = report_path(dir, t);
        let text = fs::read_to_string(&path).map_err(|e| bad(format!("task {t} report: {e}")))?;
        let r: EvalReport =
            serde_json::from_str(&text).map_err(|e| bad(format!("task {t} report: {e}")))?;
        if r.schema_version != REPORT_SCHEMA_VERSION || r.after_task != t {
            return Err(bad(format!("task {t} report has an unexpected schema or task")));
        }
        reports.push(r);
    }
    Ok((meta, reports))
}

/// Runs the experiment sequentially and returns the run directories written.
/// Nothing is written unless the whole config validates and no target run
/// directory exists yet.
pub fn run_experiment(cfg: &ExperimentConfig, output_dir: &Path, progress: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let data = cfg.prepare()?;
    let targets: Vec<(Method, u64, PathBuf)> = cfg
        .methods
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .map(|(m, s)| (m, s, run_dir(output_dir, m, s)))
        .collect();
    if let Some((_, _, dir)) = targets.iter().find(|(_, _, d)| d.exists()) {
        return Err(Error::Config(format!(
            "{} already exists; choose a fresh output directory",
            dir.display()
        )));
    }
    let layout = data.setup.layout;
    let mut written = Vec::new();
    for (method, seed, dir) in targets {
        let train = cfg.train.to_config(method, seed);
        let meta = RunMeta {
            schema_version: REPORT_SCHEMA_VERSION,
            method,
            seed,
            tasks: layout.total_tasks(),
            classes_per_task: layout.classes_per_task(),
        };
        match run_incremental(&data.train, &data.test, &data.setup, &train, &mut NoObserver) {
            Ok(state) => {
                write_run(&dir, &meta, &state, true)?;
                let last = state.reports.last().expect("at least one task");
                writeln!(
                    progress,
                    "{method} seed {seed}: final top1 {:.4}, written to {}",
                    last.top1,
                    dir.display()
                )?;
                written.push(dir);
            }
            Err(failure) => {
                write_run(&dir, &meta, &failure.state, false)?;
                let context = format!(
                    "{method} seed {seed} after {} completed tasks",
                    failure.state.completed_tasks()
                );
                return Err(match failure.error {
                    Error::NumericFailure(m) => Error::NumericFailure(format!("{context}: {m}")),
                    Error::CapacityExhausted { .. } | Error::Config(_) => failure.error,
                    other => Error::InvalidState(format!("{context}: {other}")),
                });
            }
        }
    }
    Ok(written)
}
