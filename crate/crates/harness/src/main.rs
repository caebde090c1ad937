use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use cac_harness::config::{parse_seeds, read_table, ExperimentConfig};
use cac_harness::experiment::run_and_write;
use cac_harness::model::{oracle_at, Model, RunPlan};
use cac_harness::preflight::{preflight, PreflightFailed};
use cac_harness::sweep::{run_sweep, Axis};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cac", version, about = "Decentralized coordinated actor-critic experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    config: PathBuf,
    /// Override a configuration key, e.g. `--set graph.period=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seeds as `1,2,5`, `1..=10` or `0..4`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl Common {
    fn all_overrides(&self) -> Result<Vec<String>> {
        let mut o = self.overrides.clone();
        if let Some(s) = &self.seeds {
            let seeds = parse_seeds(s)?;
            let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
            o.push(format!("seeds=[{}]", list.join(",")));
        }
        if let Some(h) = self.horizon {
            o.push(format!("horizon={h}"));
        }
        if let Some(d) = &self.output_dir {
            o.push(format!("output_dir={}", toml::Value::String(d.display().to_string())));
        }
        Ok(o)
    }

    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config, &self.all_overrides()?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every variant and seed, writing CSVs under the output directory.
    Run(Common),
    /// Run one experiment per point of a parameter grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Swept key and values, e.g. `--axis graph.period=1,5,10`. Repeatable.
        #[arg(long = "axis", value_name = "KEY=V1,V2", required = true)]
        axes: Vec<String>,
    },
    /// Check the standing assumptions without running anything.
    Preflight(Common),
    /// Print exact oracle quantities of a finite model as JSON.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// JSON policy parameters; defaults to the initial policy of `--seed`.
        #[arg(long)]
        theta: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run(common) => {
            let cfg = common.load()?;
            let result = run_and_write(&cfg)?;
            println!("{}", result.preflight);
            print!("{}", cac_harness::experiment::summary(&result));
            println!("outputs written to {}", cfg.output_dir.display());
        }
        Command::Sweep { common, axes } => {
            let axes: Vec<Axis> = axes.iter().map(|a| Axis::parse(a)).collect::<Result<_>>()?;
            let mut table = read_table(&common.config)?;
            for o in common.all_overrides()? {
                cac_harness::config::apply_override_str(&mut table, &o)?;
            }
            let base = ExperimentConfig::from_table(table.clone())?;
            let rows = run_sweep(&table, &[], &axes, &base.output_dir)?;
            for r in rows {
                println!("{:?} {}: mean={} sd={}", r.point, r.variant, r.final_mean, r.final_sd);
            }
            println!("sweep table written to {}", base.output_dir.join("sweep.csv").display());
        }
        Command::Preflight(common) => {
            let cfg = common.load()?;
            let model = Model::build(&cfg)?;
            let plan = RunPlan::new(&cfg, &model)?;
            let report = preflight(&cfg, &model, &plan);
            println!("{report}");
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Oracle { common, theta, seed } => {
            let cfg = common.load()?;
            let model = Model::build(&cfg)?;
            let params = match theta {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    Some(serde_json::from_str(&text).context("policy parameters are not valid JSON")?)
                }
                None => None,
            };
            let sol = oracle_at(&cfg, &model, params, seed)?;
            println!("{}", serde_json::to_string_pretty(&sol)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            if let Some(p) = e.downcast_ref::<PreflightFailed>() {
                eprintln!("{p}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::FAILURE
        }
    }
}
