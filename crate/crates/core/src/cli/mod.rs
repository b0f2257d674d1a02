//! Command-line entry points. Each returns the process exit code:
//! 0 success, 1 other failures (including a failed gradient check),
//! 2 bad configuration or unreadable run directories, 3 numeric failure.

pub mod compare;
pub mod config;
pub mod gradcheck;
pub mod run;

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::Error;
use crate::trainer::Method;

pub use config::ExperimentConfig;

/// Overrides the configured output directory (the `--out` flag wins).
pub const OUT_DIR_ENV: &str = "SSIL_OUT_DIR";

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::CapacityExhausted { .. }
        | Error::Ingestion { .. }
        | Error::RunDir { .. } => 2,
        Error::NumericFailure(_) => 3,
        _ => 1,
    }
}

fn fail(err: &Error, stderr: &mut dyn Write) -> i32 {
    let _ = writeln!(stderr, "error: {err}");
    exit_code(err)
}

#[derive(Debug, Clone, Default)]
pub struct RunArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed_override: Option<u64>,
    pub method_filter: Option<Vec<Method>>,
}

pub fn cmd_run(args: &RunArgs, env_out: Option<PathBuf>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let result = (|| {
        let mut cfg = ExperimentConfig::load(&args.config)?;
        cfg.restrict(args.seed_override, args.method_filter.as_deref())?;
        let out = args
            .out
            .clone()
            .or(env_out)
            .unwrap_or_else(|| cfg.output_dir.clone());
        run::run_experiment(&cfg, &out, stdout)
    })();
    match result {
        Ok(_) => 0,
        Err(e) => fail(&e, stderr),
    }
}

pub fn cmd_gradcheck(opts: &gradcheck::GradcheckOptions, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    match gradcheck::run_suite(opts) {
        Ok(report) => {
            let _ = write!(stdout, "{report}");
            let mut code = 0;
            for c in report.failures() {
                let _ = writeln!(
                    stderr,
                    "gradient check failed for {}: instance seed {}, relative error {:.3e}",
                    c.loss, c.worst_seed, c.max_rel_error
                );
                code = 1;
            }
            code
        }
        Err(e) => fail(&e, stderr),
    }
}

pub fn cmd_compare(dirs: &[PathBuf], out: Option<&Path>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let result = (|| {
        let cmp = compare::compare(dirs)?;
        let json = serde_json::to_string_pretty(&cmp.summary)?;
        match out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("comparison.csv"), &cmp.csv)?;
                std::fs::write(dir.join("bias_summary.json"), json)?;
            }
            None => {
                stdout.write_all(&cmp.csv)?;
                writeln!(stdout, "{json}")?;
            }
        }
        Ok::<_, Error>(())
    })();
    match result {
        Ok(()) => 0,
        Err(e) => fail(&e, stderr),
    }
}

pub fn cmd_report(dir: &Path, out: Option<&Path>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    match compare::report(dir, out) {
        Ok(csv) => {
            if out.is_none() {
                let _ = stdout.write_all(&csv);
            }
            0
        }
        Err(e) => fail(&e, stderr),
    }
}
