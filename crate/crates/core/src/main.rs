use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use advdepth::cli::{run, Command};
use advdepth::config::RunConfig;
use advdepth::{Error, Result};

/// Targeted adversarial perturbations against monocular depth networks.
#[derive(Parser)]
#[command(name = "advdepth", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(clap::Args)]
struct Common {
    /// Plain-text key = value configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Sub {
    /// Generate the synthetic dataset.
    GenData(Common),
    /// Train a depth model.
    Train(Common),
    /// Run an attack campaign over the xi x target grid.
    Attack(Common),
    /// Evaluate clean depth accuracy.
    Eval(Common),
    /// Cross-model transfer matrix.
    Transfer(Common),
    /// Attack effectiveness under blur and adversarial training.
    Defend(Common),
    /// Predictions along x + gamma v.
    Sweep(Common),
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &common.set {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (cmd, common) = match &cli.command {
        Sub::GenData(c) => (Command::GenData, c),
        Sub::Train(c) => (Command::Train, c),
        Sub::Attack(c) => (Command::Attack, c),
        Sub::Eval(c) => (Command::Eval, c),
        Sub::Transfer(c) => (Command::Transfer, c),
        Sub::Defend(c) => (Command::Defend, c),
        Sub::Sweep(c) => (Command::Sweep, c),
    };
    match resolve(common).and_then(|cfg| run(cmd, &cfg, &common.out)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} code={} message={:?}", e.kind(), e.code(), e.to_string());
            ExitCode::from(e.code() as u8)
        }
    }
}
