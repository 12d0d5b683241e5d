use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ppd_experiments::config::{ExperimentConfig, ExperimentKind, OUTPUT_ROOT_ENV};
use ppd_experiments::error::RunResult;

#[derive(Parser)]
#[command(name = "ppd", version, about = "Posterior predictive experiments")]
struct Cli {
    /// Worker threads (default: one per logical core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// TV over a depth x bin-count grid.
    DepthBins(RunArgs),
    /// Plain vs normalized attention across context sizes.
    Normalization(RunArgs),
    /// Metrics vs context size for each depth and tuning size.
    Generalization(RunArgs),
    /// Admissible step size vs context size.
    Stepsize(RunArgs),
    /// Condition numbers vs context size.
    Spectra(RunArgs),
    /// Truncation interval of a prior.
    Calibrate(RunArgs),
    /// Empirical-Bayes fit to a CSV file.
    FitEb(RunArgs),
    /// Rerun the config recorded in a manifest.
    Rerun {
        manifest: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config (a run manifest also works).
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct CommonArgs {
    /// Override a config key, e.g. `--set sweep.depths=[2,4]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the resolved config and sweep grid, then exit.
    #[arg(long)]
    dry_run: bool,
}

fn kind_of(cmd: &Command) -> Option<ExperimentKind> {
    Some(match cmd {
        Command::DepthBins(_) => ExperimentKind::DepthBins,
        Command::Normalization(_) => ExperimentKind::Normalization,
        Command::Generalization(_) => ExperimentKind::Generalization,
        Command::Stepsize(_) => ExperimentKind::Stepsize,
        Command::Spectra(_) => ExperimentKind::Spectra,
        Command::Calibrate(_) => ExperimentKind::Calibrate,
        Command::FitEb(_) => ExperimentKind::FitEb,
        Command::Rerun { .. } => return None,
    })
}

fn execute(cli: Cli) -> RunResult<()> {
    let kind = kind_of(&cli.command);
    let (cfg, common) = match cli.command {
        Command::Rerun { manifest, common } => (ExperimentConfig::from_manifest(&manifest, &common.overrides)?, common),
        Command::DepthBins(a)
        | Command::Normalization(a)
        | Command::Generalization(a)
        | Command::Stepsize(a)
        | Command::Spectra(a)
        | Command::Calibrate(a)
        | Command::FitEb(a) => {
            let kind = kind.expect("experiment subcommand");
            (ExperimentConfig::load(kind, a.config.as_deref(), &a.common.overrides)?, a.common)
        }
    };
    if common.dry_run {
        print!("{}", ppd_experiments::describe(&cfg)?);
        return Ok(());
    }
    log::info!("running {} into {} (output root from {OUTPUT_ROOT_ENV})", cfg.experiment, cfg.output_path().display());
    let report = ppd_experiments::run(&cfg, cli.threads)?;
    println!("{}: {} rows", cfg.experiment, report.rows);
    for f in &report.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
