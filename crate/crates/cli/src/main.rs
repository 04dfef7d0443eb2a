use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use oemstream::config::RunConfig;
use oemstream_cli::commands;
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "oemstream", version, about = "Streaming clip-to-text memory pipeline and benchmarks")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, short, global = true, default_value = "oemstream.json")]
    config: PathBuf,
    /// Directory for JSONL records and CSV/markdown reports.
    #[arg(long, short, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Replay or run the configured stream and persist memory, answers and events.
    Run {
        /// JSONL of queries (`query_id`, `q`, `candidates`, optional `submit_time`).
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    /// Accuracy over a JSONL item file, repeated over consecutive seeds.
    Bench {
        #[arg(long)]
        items: PathBuf,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Description latency over a grid of backend configurations.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Time to first token of single-token answers.
    Ttft {
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Items whose questions and streams become the fixtures.
        #[arg(long)]
        items: Option<PathBuf>,
    },
    /// Run the pipeline and serve the live API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let cfg = RunConfig::load(&cli.config).with_context(|| format!("loading {}", cli.config.display()))?;
    match cli.command {
        Command::Run { queries } => {
            let queries = match queries {
                Some(p) => commands::read_queries(&p)?,
                None => Vec::new(),
            };
            let report = commands::run(&cfg, &queries, &cli.out)?;
            println!("{}", commands::summarize(&report));
        }
        Command::Bench { items, seeds } => print!("{}", commands::bench(&cfg, &items, seeds, &cli.out)?),
        Command::Sweep { grid, repeats } => print!("{}", commands::sweep(&cfg, &grid, repeats, &cli.out)?),
        Command::Ttft { n, items } => print!("{}", commands::ttft(&cfg, n, items.as_ref(), &cli.out)?),
        Command::Serve { port, host } => serve(&cfg, &host, port, &cli.out)?,
    }
    Ok(())
}

fn serve(cfg: &RunConfig, host: &str, port: u16, out: &std::path::Path) -> Result<()> {
    let pipeline = Arc::new(commands::start_pipeline(cfg)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port)).await?;
        tracing::info!(addr = %listener.local_addr()?, "serving");
        axum::serve(listener, oemstream_cli::router(pipeline.clone()))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    rt.shutdown_background();
    match Arc::try_unwrap(pipeline) {
        Ok(p) => {
            let report = p.join()?;
            report.persist(out)?;
            println!("{}", commands::summarize(&report));
        }
        Err(_) => tracing::warn!("pipeline still referenced at shutdown; run not persisted"),
    }
    Ok(())
}
