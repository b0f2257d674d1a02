use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ssil::cli::{self, gradcheck::GradcheckOptions, RunArgs};
use ssil::trainer::Method;

#[derive(Parser)]
#[command(name = "ssil", version, about = "Class-incremental learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured (method, seed) pair and write its reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config and $SSIL_OUT_DIR.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
        /// Comma-separated subset of the configured methods.
        #[arg(long, value_delimiter = ',')]
        method_filter: Option<Vec<Method>>,
    },
    /// Finite-difference check of every loss through the model.
    Gradcheck {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<cli::gradcheck::LossKind>,
    },
    /// Side-by-side average accuracies and bias statistics of finished runs.
    Compare {
        #[arg(required = true, num_args = 1..)]
        run_dirs: Vec<PathBuf>,
        /// Write comparison.csv and bias_summary.json here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render a run's CSV tables from its JSON reports.
    Report {
        run_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mut stdout, mut stderr) = (std::io::stdout(), std::io::stderr());
    let code = match cli.command {
        Command::Run {
            config,
            out,
            seed_override,
            method_filter,
        } => {
            let args = RunArgs {
                config,
                out,
                seed_override,
                method_filter,
            };
            let env_out = std::env::var_os(cli::OUT_DIR_ENV).map(PathBuf::from);
            cli::cmd_run(&args, env_out, &mut stdout, &mut stderr)
        }
        Command::Gradcheck {
            instances,
            seed,
            inject_fault,
        } => cli::cmd_gradcheck(
            &GradcheckOptions {
                instances,
                seed,
                fault: inject_fault,
            },
            &mut stdout,
            &mut stderr,
        ),
        Command::Compare { run_dirs, out } => cli::cmd_compare(&run_dirs, out.as_deref(), &mut stdout, &mut stderr),
        Command::Report { run_dir, out } => cli::cmd_report(&run_dir, out.as_deref(), &mut stdout, &mut stderr),
    };
    ExitCode::from(code as u8)
}
