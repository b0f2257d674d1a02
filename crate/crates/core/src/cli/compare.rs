//! `compare` and `report`: read finished run directories, never write into
//! them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::cli::run::{load_run, metrics_csv, write_tables, RunMeta};
use crate::error::{Error, Result};
use crate::eval::{average_incremental_accuracy, EvalReport, Metric, REPORT_SCHEMA_VERSION};

pub const COMPARISON_HEADER: [&str; 9] = [
    "run",
    "method",
    "seed",
    "k",
    "avg_top1",
    "avg_topk",
    "final_top1",
    "delta_avg_top1",
    "delta_avg_topk",
];

#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub meta: RunMeta,
    pub reports: Vec<EvalReport>,
}

/// A run directory itself, or every `<method>/<seed>` run below an
/// experiment directory, in sorted order.
pub fn discover_runs(dir: &Path) -> Result<Vec<LoadedRun>> {
    let load = |d: PathBuf| -> Result<LoadedRun> {
        let (meta, reports) = load_run(&d)?;
        Ok(LoadedRun {
            dir: d,
            meta,
            reports,
        })
    };
    if dir.join("run.json").is_file() {
        return Ok(vec![load(dir.to_path_buf())?]);
    }
    let not_found = || Error::RunDir {
        path: dir.to_path_buf(),
        message: "no run.json here or two levels below".into(),
    };
    let mut found = Vec::new();
    let children = |d: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = fs::read_dir(d)
            .map_err(|_| not_found())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        v.sort();
        Ok(v)
    };
    for method_dir in children(dir)? {
        for seed_dir in children(&method_dir)? {
            if seed_dir.join("run.json").is_file() {
                found.push(load(seed_dir)?);
            }
        }
    }
    if found.is_empty() {
        return Err(not_found());
    }
    Ok(found)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasEntry {
    pub run: String,
    pub method: String,
    pub seed: u64,
    /// Per task from the second on: share of old-task test samples predicted
    /// into the newest task.
    pub old_in_latest: Vec<f64>,
    /// Same, restricted to old-task samples that left their own task.
    pub old_to_latest: Vec<f64>,
    pub final_old_in_latest: f64,
    pub final_old_to_latest: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasSummary {
    pub schema_version: u32,
    pub runs: Vec<BiasEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub csv: Vec<u8>,
    pub summary: BiasSummary,
}

pub fn compare(dirs: &[PathBuf]) -> Result<Comparison> {
    let mut runs = Vec::new();
    for d in dirs {
        runs.extend(discover_runs(d)?);
    }
    if runs.len() < 2 {
        return Err(Error::Config("compare needs at least two runs".into()));
    }
    let avgs: Vec<(f64, f64)> = runs
        .iter()
        .map(|r| {
            Ok((
                average_incremental_accuracy(&r.reports, Metric::Top1)?,
                average_incremental_accuracy(&r.reports, Metric::TopK)?,
            ))
        })
        .collect::<Result<_>>()?;
    let (base1, basek) = avgs[0];
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COMPARISON_HEADER)?;
    let mut entries = Vec::new();
    for (r, &(a1, ak)) in runs.iter().zip(&avgs) {
        let last = r.reports.last().expect("runs have reports");
        w.write_record([
            r.dir.display().to_string(),
            r.meta.method.to_string(),
            r.meta.seed.to_string(),
            last.k.to_string(),
            a1.to_string(),
            ak.to_string(),
            last.top1.to_string(),
            (a1 - base1).to_string(),
            (ak - basek).to_string(),
        ])?;
        let later = || r.reports.iter().filter(|x| x.after_task >= 2);
        entries.push(BiasEntry {
            run: r.dir.display().to_string(),
            method: r.meta.method.to_string(),
            seed: r.meta.seed,
            old_in_latest: later().map(EvalReport::old_samples_in_latest_task).collect(),
            old_to_latest: later().map(EvalReport::old_to_latest_fraction).collect(),
            final_old_in_latest: last.old_samples_in_latest_task(),
            final_old_to_latest: last.old_to_latest_fraction(),
        });
    }
    Ok(Comparison {
        csv: w.into_inner().map_err(|e| Error::Io(e.into_error()))?,
        summary: BiasSummary {
            schema_version: REPORT_SCHEMA_VERSION,
            runs: entries,
        },
    })
}

/// Re-renders the CSV tables of one run from its JSON reports into `out`,
/// or returns the metrics table when `out` is `None`.
pub fn report(dir: &Path, out: Option<&Path>) -> Result<Vec<u8>> {
    let (meta, reports) = load_run(dir)?;
    if let Some(out) = out {
        write_tables(out, &meta, &reports)?;
    }
    metrics_csv(&meta, &reports)
}
