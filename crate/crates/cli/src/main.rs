use std::io::IsTerminal;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ielts_aes::runner::{
    build_index_file, load_dataset, rebuild_report, results_markdown, run_experiment, run_regeneration, score_one,
    ExperimentConfig, RunOptions,
};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "ielts-aes", version, about = "Criterion-aware IELTS Writing Task 2 scoring and evaluation")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true, default_value = "experiment.json")]
    config: PathBuf,
    /// Restrict to this strategy; repeatable.
    #[arg(long, global = true)]
    strategy: Vec<String>,
    /// Process only the first N essays of the split.
    #[arg(long, global = true, value_name = "N")]
    limit: Option<usize>,
    /// Never reach the network: scripted backends and cached responses only.
    #[arg(long, global = true)]
    offline: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the corpora, assign splits and print statistics.
    Ingest,
    /// Re-generate analytic evaluations for the training split.
    Regen,
    /// Retrieval index operations.
    Index {
        #[command(subcommand)]
        command: IndexCommand,
    },
    /// Score one essay with one strategy and print the result as JSON.
    Score {
        /// Essay id from either split.
        #[arg(long)]
        essay: String,
    },
    /// Score the test split with every configured strategy.
    Eval,
    /// Re-emit report files from stored traces.
    Report,
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Embed the training split and write the index file.
    Build,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let cli = Cli::parse();
    let config = ExperimentConfig::load(&cli.config).with_context(|| format!("loading {}", cli.config.display()))?;
    for warning in config.validate()? {
        tracing::warn!("{warning}");
    }
    let options = RunOptions { offline: cli.offline, limit: cli.limit, strategies: cli.strategy.clone() };
    match cli.command {
        Command::Ingest => {
            let data = load_dataset(&config)?;
            println!("{}", serde_json::to_string_pretty(&data.summary)?);
        }
        Command::Regen => {
            let summary = run_regeneration(&config, &options)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Index { command: IndexCommand::Build } => {
            let data = load_dataset(&config)?;
            let (path, index) = build_index_file(&config, &data.train)?;
            println!("{} entries, dim {}, {} -> {}", index.len(), index.dim(), index.embedder_id(), path.display());
        }
        Command::Score { essay } => {
            let [strategy] = cli.strategy.as_slice() else {
                bail!("`score` needs exactly one --strategy");
            };
            let result = score_one(&config, strategy, &essay, cli.offline)?;
            println!("{}", serde_json::to_string_pretty(&result)?);
        }
        Command::Eval => {
            let outcome = run_experiment(&config, &options)?;
            print!("{}", results_markdown(&outcome.report));
            eprintln!(
                "cache hits {}, misses {}, failures {}; reports in {}",
                outcome.meta.cache_hits,
                outcome.meta.cache_misses,
                outcome.meta.failures,
                config.output_dir.display()
            );
        }
        Command::Report => {
            let report = rebuild_report(&config, &options)?;
            print!("{}", results_markdown(&report));
        }
    }
    Ok(())
}
