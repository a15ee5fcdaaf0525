use std::path::PathBuf;

use anyhow::{Context, Result};
use bea_harness::{
    ablate, emit_report, eval_from_dumps, run_experiment, ExperimentConfig, MetricsRow,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bea",
    about = "Train and evaluate the budding ensemble detector"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model, dump its detections and compute metrics.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run all four tandem switch settings for every configured seed.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Recompute metrics from an existing run's detection dumps.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Merge metrics from run directories and draw comparison figures.
    Report {
        /// Run directories, each holding metrics.csv and evaluation.json.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn print_rows<'a>(rows: impl IntoIterator<Item = &'a MetricsRow>) -> Result<()> {
    let mut w = csv::Writer::from_writer(std::io::stdout());
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { common, seed } => {
            let cfg = load(&common)?;
            let run = run_experiment(&cfg, seed)
                .with_context(|| format!("run {} seed {seed}", cfg.config_id))?;
            log::info!("outputs in {}", run.run_dir.display());
            print_rows([run.row()])
        }
        Command::Ablate { common } => {
            let runs = ablate(&load(&common)?)?;
            print_rows(runs.iter().map(|r| r.row()))
        }
        Command::Eval { common, seed } => {
            let ev = eval_from_dumps(&load(&common)?, seed)?;
            print_rows([&ev.row])
        }
        Command::Report { runs, out } => {
            let s = emit_report(&runs, &out)?;
            log::info!(
                "{} rows, {} figures in {}",
                s.rows.len(),
                s.plots.len(),
                out.display()
            );
            print_rows(&s.rows)
        }
    }
}
