use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use softmoa_cli::commands::{analyze, benchmark, gen_data, gradcheck, paramcount, sweep, train};
use softmoa_cli::{CliError, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "softmoa", version, about = "Mixture-of-adapters experiments on a frozen spectrogram transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for initialization and batch order.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset file replacing the configured data.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per task; write log, summary and checkpoint.
    Train(Common),
    /// Time full training steps for each configured PETL variant.
    Benchmark {
        #[command(flatten)]
        common: Common,
        /// Timed steps (at least 20).
        #[arg(long)]
        steps: Option<usize>,
        /// Untimed warmup steps (at least 5).
        #[arg(long)]
        warmup: Option<usize>,
    },
    /// Compare backprop against central differences on a tiny model.
    Gradcheck(Common),
    /// Train a grid of PETL settings.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// budget, adapters or slots.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Export expert contributions of a trained Soft-MoA checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Layers to include: `all`, or indices and ranges such as `0,2-3`.
        #[arg(long)]
        layers: Option<String>,
        /// Checkpoint to analyze (default: <out>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Count parameters by partition and PETL multiply-adds.
    Paramcount(Common),
    /// Write the configured datasets as files.
    GenData(Common),
}

fn load(common: &Common, extra: Overrides) -> Result<RunConfig, CliError> {
    let overrides = Overrides {
        out: common.out.clone(),
        seed: common.seed,
        data: common.data.clone(),
        ..extra
    };
    Ok(RunConfig::load(common.config.as_deref(), &overrides)?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load(&c, Overrides::default())?;
            print!("{}", train::run(&cfg)?);
        }
        Command::Benchmark { common, steps, warmup } => {
            let cfg = load(&common, Overrides { steps, warmup, ..Default::default() })?;
            print!("{}", benchmark::run(&cfg)?);
        }
        Command::Gradcheck(c) => {
            let cfg = load(&c, Overrides::default())?;
            let outcome = gradcheck::run(&cfg)?;
            print!("{outcome}");
            if !outcome.passed() {
                return Err(CliError::Numeric(format!(
                    "gradient check failed: worst relative error {:.3e}",
                    outcome.report.worst()
                )));
            }
        }
        Command::Sweep { common, mode } => {
            let cfg = load(&common, Overrides { mode, ..Default::default() })?;
            print!("{}", sweep::run(&cfg)?);
        }
        Command::Analyze {
            common,
            layers,
            checkpoint,
        } => {
            if common.config.is_none() {
                return Err(CliError::Config(
                    "analyze needs --config describing the checkpoint's architecture".into(),
                ));
            }
            let cfg = load(
                &common,
                Overrides {
                    layers,
                    checkpoint,
                    ..Default::default()
                },
            )?;
            print!("{}", analyze::run(&cfg)?);
        }
        Command::Paramcount(c) => {
            let cfg = load(&c, Overrides::default())?;
            print!("{}", paramcount::run(&cfg)?);
        }
        Command::GenData(c) => {
            let cfg = load(&c, Overrides::default())?;
            for p in gen_data::run(&cfg)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
