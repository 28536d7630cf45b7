use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use harness::config::ExperimentKind;
use harness::output::{read_config_hash, read_csv, write_csv};
use harness::{make_env, run_experiment, summarize, ExperimentConfig, RunOptions, RunRecord};

#[derive(Parser)]
#[command(name = "moco", about = "Model-correction experiments on tabular MDPs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct GridArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; falls back to the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Added to every seed.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Write an environment, optionally smoothed, as TOML.
    MakeEnv {
        #[arg(long, default_value = "cliffwalk")]
        name: String,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        lambda: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run a planning or learning grid: runs.csv, summary.csv, timings.csv.
    Run(GridArgs),
    /// Run bound audits on random instances: audits.csv.
    Audit(GridArgs),
    /// Rebuild summary.csv from a runs.csv.
    Summarize {
        /// A runs.csv, or a directory holding one.
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::MakeEnv { name, lambda, out } => {
            let path = make_env(&name, lambda, &out)?;
            println!("{}", path.display());
        }
        Command::Run(args) => grid(args, false)?,
        Command::Audit(args) => grid(args, true)?,
        Command::Summarize { runs, out } => {
            let runs = if runs.is_dir() { runs.join("runs.csv") } else { runs };
            let records: Vec<RunRecord> = read_csv(&runs)?;
            let hash = read_config_hash(&runs)?.unwrap_or_default();
            let out = out.unwrap_or_else(|| runs.with_file_name("summary.csv"));
            write_csv(&out, &hash, &summarize(&records))?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn grid(args: GridArgs, audit: bool) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    if audit != (cfg.kind == ExperimentKind::Audit) {
        bail!("`{}` holds a {:?} experiment; use `{}`", args.config.display(), cfg.kind, if audit { "run" } else { "audit" });
    }
    let out = args.out.or_else(|| cfg.output.clone()).context("no --out given and the config sets no output")?;
    let opts = RunOptions { workers: args.workers, seed_offset: args.seed_offset };
    let s = run_experiment(&cfg, &out, &opts)?;
    if audit {
        println!("{} audits, {} failing -> {}", s.rows, s.failing_audits, out.display());
        if s.failing_audits > 0 {
            std::process::exit(1);
        }
    } else {
        println!("{} cells ({} failed), {} rows -> {}", s.cells, s.failed_cells, s.rows, out.display());
    }
    Ok(())
}
