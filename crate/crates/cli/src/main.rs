use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use vlp_slam::harness::{self, Estimator, ExperimentConfig, ScenarioKind};

/// VLP + LiDAR + odometry localization experiments on the simulated lab.
#[derive(Parser, Debug)]
#[command(name = "vlpslam", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the trajectory loop and write the world and raw sensor logs.
    Simulate(Common),
    /// Build maps with and without the LED origin constraint.
    Map(Common),
    /// Compare estimators at randomly sampled stationary poses.
    StaticAccuracy {
        #[command(flatten)]
        common: Common,
        /// Poses per seed.
        #[arg(long)]
        poses: Option<usize>,
    },
    /// Compare estimators along the loop with LED outage zones.
    Trajectory(Common),
    /// Start in the wrong corridor and recover through VLP.
    Recovery(Common),
    /// Drive the built-in goal scenarios with the full stack.
    Navigate(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Seed to run; repeat for several. Replaces the config's seed list.
    #[arg(long = "seed", short, required = true, num_args = 1)]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// World file overriding the config.
    #[arg(long)]
    world: Option<PathBuf>,
    /// Estimators to run, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_estimator)]
    estimators: Option<Vec<Estimator>>,
    /// Disable every noise source.
    #[arg(long)]
    noise_free: bool,
}

fn parse_estimator(s: &str) -> Result<Estimator, String> {
    Estimator::ALL
        .into_iter()
        .find(|e| e.name() == s)
        .ok_or_else(|| format!("unknown estimator '{s}' (expected one of fused, slo-vlp, mcl, odometry)"))
}

fn configure(kind: ScenarioKind, c: Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    cfg.scenario = kind;
    cfg.seeds = c.seeds;
    if let Some(o) = c.output {
        cfg.output_dir = o;
    }
    if let Some(w) = c.world {
        cfg.world = Some(w);
    }
    if let Some(e) = c.estimators {
        cfg.estimators = e;
    }
    cfg.noise_free |= c.noise_free;
    Ok(cfg)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = match cli.command {
        Command::Simulate(c) => configure(ScenarioKind::Simulate, c)?,
        Command::Map(c) => configure(ScenarioKind::Map, c)?,
        Command::StaticAccuracy { common, poses } => {
            let mut cfg = configure(ScenarioKind::StaticAccuracy, common)?;
            if let Some(n) = poses {
                cfg.static_accuracy.poses = n;
            }
            cfg
        }
        Command::Trajectory(c) => configure(ScenarioKind::Trajectory, c)?,
        Command::Recovery(c) => configure(ScenarioKind::Recovery, c)?,
        Command::Navigate(c) => configure(ScenarioKind::Navigate, c)?,
    };
    let exp = cfg.prepare().context("invalid experiment")?;
    let report = harness::run(&exp)?;
    let emitted = harness::emit_reports(&exp, &report, &exp.config.output_dir)?;
    for c in report.checks() {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    for f in emitted.files.iter().chain(&emitted.timing_files) {
        println!("wrote {}", f.display());
    }
    Ok(report.passed())
}
