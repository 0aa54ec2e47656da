use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use faasim::headless::{self, BattlegroundOptions, RunOptions};
use faasim::service;
use faasim_core::{PlacementKind, RoutingKind, ScriptedFailure};
use tokio::net::TcpListener;

#[derive(Parser)]
#[command(
    name = "faasim",
    version,
    about = "Deterministic serverless platform simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario headlessly and write its artifacts.
    Run {
        /// Bundled scenario name or path to a scenario/config JSON file.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        until: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        routing: Option<RoutingKind>,
        #[arg(long)]
        placement: Option<PlacementKind>,
        /// Scripted node failure, e.g. `N1@5000`. Repeatable.
        #[arg(long = "fail-node", value_parser = headless::parse_fail_node)]
        fail_node: Vec<ScriptedFailure>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run two configs side by side on one arrival schedule.
    Battleground {
        #[arg(long = "config-a")]
        config_a: String,
        /// Defaults to the second config of a two-arena scenario.
        #[arg(long = "config-b")]
        config_b: Option<String>,
        #[arg(long)]
        until: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Start the HTTP control service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Initial scenario name or file.
        #[arg(long, default_value = "steady-state")]
        scenario: String,
        /// Overrides the scenario's pace (sim-ms per wall second, 0 = unpaced).
        #[arg(long)]
        pace: Option<f64>,
        /// Static UI bundle to host at `/`.
        #[arg(long = "ui-dir")]
        ui_dir: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            scenario,
            until,
            seed,
            routing,
            placement,
            fail_node,
            out,
        } => {
            let summary = headless::run(&RunOptions {
                scenario,
                until_ms: until,
                seed,
                routing,
                placement,
                fail_nodes: fail_node,
                out: out.clone(),
            })?;
            let s = &summary.stats;
            println!(
                "{} @ {} ms: {} created, {} succeeded, {} failed, cost {}; artifacts in {}",
                summary.scenario,
                summary.until_ms,
                s.total_created,
                s.total_succeeded,
                s.total_failed,
                s.cumulative_cost,
                out.display()
            );
        }
        Command::Battleground {
            config_a,
            config_b,
            until,
            seed,
            out,
        } => {
            let report = headless::battleground(&BattlegroundOptions {
                config_a,
                config_b,
                until_ms: until,
                seed,
                out: out.clone(),
            })?;
            for a in &report.arenas {
                println!(
                    "{}: {}/{} succeeded={} failed={} cold_starts={} cost={}",
                    a.label,
                    a.routing_strategy,
                    a.placement_strategy,
                    a.total_succeeded,
                    a.total_failed,
                    a.cold_starts,
                    a.cumulative_cost
                );
            }
            println!("report in {}", out.display());
        }
        Command::Serve {
            port,
            host,
            scenario,
            pace,
            ui_dir,
        } => {
            let mut config = headless::load_config_source(&scenario)?.config;
            if let Some(p) = pace {
                config.pace = p;
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = TcpListener::bind((host.as_str(), port))
                    .await
                    .with_context(|| format!("binding {host}:{port}"))?;
                println!("listening on http://{}", listener.local_addr()?);
                service::serve(listener, config, ui_dir).await
            })?;
        }
    }
    Ok(())
}
