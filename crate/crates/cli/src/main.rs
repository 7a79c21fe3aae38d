use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use excl_cli::{parse_config, RunConfig};

#[derive(Parser)]
#[command(
    name = "excl",
    version,
    about = "Dual-expert source-free domain adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the source/target datasets and the zero-shot prompt expert.
    Generate(Common),
    /// Train the source expert on the source dataset.
    Pretrain(Common),
    /// Adapt both experts to the target dataset.
    Adapt(Common),
    /// Score a checkpoint pair on the target dataset.
    Eval(Common),
    /// Run the seven-row loss ablation over `ablation_seeds`.
    Ablate(Common),
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed` from the config file.
    #[arg(long)]
    seed: Option<u64>,
}

struct StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, m: &log::Metadata) -> bool {
        m.level() <= log::Level::Warn
    }

    fn log(&self, r: &log::Record) {
        if self.enabled(r.metadata()) {
            eprintln!("excl: {}: {}", r.level().as_str().to_lowercase(), r.args());
        }
    }

    fn flush(&self) {}
}

static LOGGER: StderrLogger = StderrLogger;

fn load(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

type Handler = fn(&RunConfig) -> anyhow::Result<Vec<PathBuf>>;

fn run(cli: Cli) -> anyhow::Result<Vec<PathBuf>> {
    let (cmd, common): (Handler, _) = match &cli.command {
        Command::Generate(c) => (excl_cli::cmd_generate, c),
        Command::Pretrain(c) => (excl_cli::cmd_pretrain, c),
        Command::Adapt(c) => (excl_cli::cmd_adapt, c),
        Command::Eval(c) => (excl_cli::cmd_eval, c),
        Command::Ablate(c) => (excl_cli::cmd_ablate, c),
    };
    cmd(&load(common)?)
}

fn main() -> ExitCode {
    log::set_logger(&LOGGER).expect("logger installed once");
    log::set_max_level(log::LevelFilter::Warn);
    match run(Cli::parse()) {
        Ok(written) => {
            for p in written {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("excl: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
