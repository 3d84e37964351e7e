use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dmlkit::commands::{self, Axis, Protocol};
use dmlkit::{CliError, RunConfig};

#[derive(Parser)]
#[command(
    name = "dmlkit",
    version,
    about = "Deep metric learning with local/global descriptors and attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config and write metrics and checkpoints.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out classes.
    Eval {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        k: Vec<usize>,
        #[arg(long, value_enum, default_value = "standard")]
        protocol: Protocol,
        /// Also write the report as JSON into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every variant along one ablation axis.
    Ablate {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negate the analytic gradient of this case to exercise failure.
        #[arg(long)]
        flip_sign: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let run = commands::cmd_train(&cfg, &out, |line| eprintln!("{line}"))?;
            eprintln!(
                "trained {} parameters for {} epochs; outputs in {}",
                commands::param_count(&run.trainer),
                run.metrics.len(),
                out.display()
            );
        }
        Command::Eval {
            config,
            checkpoint,
            k,
            protocol,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let report = commands::cmd_eval(&cfg, &checkpoint, &k, protocol)?;
            print!("{}", report.to_csv());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
                let path = dir.join(format!("eval_{}.json", protocol.name()));
                let json = report.to_json()?;
                std::fs::write(&path, json).map_err(|e| CliError::io(&path, e))?;
            }
        }
        Command::Ablate { config, axis, out } => {
            let cfg = RunConfig::load(&config)?;
            let results = commands::cmd_ablate(&cfg, axis, &out, commands::worker_count())?;
            print!("{}", commands::ablation_summary_csv(&results));
        }
        Command::Gradcheck { seed, flip_sign } => {
            let report = commands::cmd_gradcheck(seed, flip_sign.as_deref())?;
            print!("{}", commands::format_suite(&report));
            if let Some(bad) = report.cases.iter().find(|c| !c.passed) {
                return Err(CliError::Gradcheck(bad.name.to_string()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
