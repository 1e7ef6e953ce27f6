use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sscl_lab::commands::{cmd_ablate, cmd_gen_stream, cmd_run, Overrides};
use sscl_core::stream::Variant;
use sscl_lab::config::ExperimentConfig;
use sscl_lab::LabResult;

#[derive(Parser)]
#[command(name = "sscl-lab", version, about = "Semi-supervised continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the `[stream]` stream and write it as CSV files.
    GenStream {
        #[command(flatten)]
        common: Common,
        /// Stream variant, overriding `[stream] variant`.
        #[arg(long, value_parser = ["standard", "imbalanced", "inconsistent"])]
        variant: Option<String>,
    },
    /// Train `[train]` once per seed and summarise.
    Run(Common),
    /// Train every `[grid]` cell once per seed and compare.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds, overriding `seeds` in the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Overwrite an existing stream directory.
    #[arg(long)]
    force: bool,
    /// Cap on parallel runs.
    #[arg(long, env = "SSCL_LAB_THREADS")]
    threads: Option<usize>,
}

impl Common {
    fn load(&self) -> LabResult<(ExperimentConfig, Overrides)> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let o = Overrides { out: self.out.clone(), seeds: self.seeds.clone(), force: self.force, threads: self.threads };
        o.apply(&mut cfg)?;
        Ok((cfg, o))
    }
}

fn dispatch(cli: Cli) -> LabResult<()> {
    match cli.command {
        Command::GenStream { common, variant } => {
            let (mut cfg, o) = common.load()?;
            if let Some(v) = variant {
                cfg.stream.variant = match v.as_str() {
                    "imbalanced" => Variant::Imbalanced,
                    "inconsistent" => Variant::Inconsistent,
                    _ => Variant::Standard,
                };
                cfg.stream.validate()?;
            }
            cmd_gen_stream(&cfg, o.force)?;
        }
        Command::Run(c) => {
            let (cfg, o) = c.load()?;
            let results = cmd_run(&cfg, o.threads)?;
            for r in results {
                println!("seed {}: A_avg {:.4} A_last {:.4}", r.seed, r.a_avg, r.a_last);
            }
            println!("summary: {}", cfg.out.join("summary.csv").display());
        }
        Command::Ablate(c) => {
            let (cfg, o) = c.load()?;
            for (name, results) in cmd_ablate(&cfg, o.threads)? {
                let (m, s) = sscl_lab::report::mean_std(&results.iter().map(|r| r.a_avg).collect::<Vec<_>>());
                println!("{name}: A_avg {m:.4} ± {s:.4}");
            }
            println!("comparison: {}", cfg.out.join("comparison.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
