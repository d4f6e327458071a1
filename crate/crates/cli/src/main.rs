use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use tqlsim::config::{ExperimentConfig, Mobility, Policy};
use tqlsim::harness;

#[derive(Parser)]
#[command(
    name = "tqlsim",
    version,
    about = "mm-Wave NOMA association and beam-count simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the expert gNBs offline and write the transfer bundle.
    TrainExpert(Common),
    /// Run one policy over the configured loads and seeds.
    Run(Common),
    /// Run every policy, training the expert first if no bundle exists.
    Sweep(Common),
    /// Parse and check a configuration file.
    ValidateConfig(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    policy: Option<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated offered loads in Mbps.
    #[arg(long, value_delimiter = ',')]
    load: Option<Vec<f64>>,
    #[arg(long)]
    mobility: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Simulated TTIs per run.
    #[arg(long)]
    ttis: Option<usize>,
    /// Use the full-length profile (40 seeds, 6000 TTIs).
    #[arg(long)]
    full: bool,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)
                .with_context(|| format!("reading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if self.full {
            cfg = cfg.full_profile();
        }
        let e = &mut cfg.experiment;
        if let Some(p) = &self.policy {
            e.policy = p.parse::<Policy>()?;
        }
        if let Some(m) = &self.mobility {
            e.mobility = m.parse::<Mobility>()?;
        }
        if let Some(s) = &self.seeds {
            e.seeds = s.clone();
        }
        if let Some(l) = &self.load {
            e.loads_mbps = l.clone();
        }
        if let Some(o) = &self.out {
            e.output_dir = o.clone();
        }
        if let Some(b) = &self.bundle {
            e.bundle = Some(b.clone());
        }
        if let Some(t) = self.ttis {
            e.tti_count = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn train(cfg: &ExperimentConfig) -> Result<()> {
    let training = harness::train_expert(cfg)?;
    let path = cfg.bundle_path();
    harness::write_expert(&training, &path)?;
    println!(
        "expert bundle written to {} ({} TTIs, converged: {})",
        path.display(),
        training.rewards.len(),
        training.converged
    );
    Ok(())
}

fn run(cfg: &ExperimentConfig) -> Result<()> {
    let result = harness::run_experiment(cfg)?;
    for l in &result.loads {
        let r = &l.row;
        println!(
            "{:<9} {:<15} load {:>5.2} Mbps  rate {:.4} ± {:.4} Mbps  loss {:.2}%",
            r.policy.name(),
            r.mobility.name(),
            r.load_mbps,
            r.sum_rate_mbps_mean,
            r.sum_rate_mbps_ci95,
            r.loss_pct_mean
        );
    }
    info!("artifacts in {}", harness::experiment_dir(cfg).display());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ValidateConfig(c) => {
            c.resolve()?;
            println!("configuration ok");
        }
        Command::TrainExpert(c) => train(&c.resolve()?)?,
        Command::Run(c) => run(&c.resolve()?)?,
        Command::Sweep(c) => {
            let mut cfg = c.resolve()?;
            if !cfg.bundle_path().exists() {
                train(&cfg)?;
            }
            for policy in Policy::ALL {
                cfg.experiment.policy = policy;
                run(&cfg)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
