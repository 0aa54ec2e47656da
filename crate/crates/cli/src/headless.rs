//! Batch runs that write their artifacts to a directory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use faasim_core::battleground::ArenaLabel;
use faasim_core::{
    load_scenario, Battleground, ComparisonReport, CumulativeStats, PlacementKind, RoutingKind,
    Scenario, ScriptedFailure, SimConfig, SimTime, Simulation,
};
use serde::Serialize;

/// Resolves a bundled scenario name or a JSON file. Files may hold a full
/// scenario or a bare config.
pub fn load_config_source(source: &str) -> Result<Scenario> {
    let path = Path::new(source);
    if !path.exists() {
        return load_scenario(source).map_err(Into::into);
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if value.get("config").is_some() {
        return Scenario::from_json(&text).with_context(|| format!("loading {}", path.display()));
    }
    let config: SimConfig = serde_json::from_value(value)
        .with_context(|| format!("loading config from {}", path.display()))?;
    config.validate()?;
    Ok(Scenario {
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        description: String::new(),
        config,
        config_b: None,
    })
}

/// Parses `N1@5000`.
pub fn parse_fail_node(s: &str) -> Result<ScriptedFailure, String> {
    let (node, at) = s
        .split_once('@')
        .ok_or_else(|| format!("expected <node>@<ms>, got `{s}`"))?;
    Ok(ScriptedFailure {
        node: node.parse().map_err(|e| format!("{e}"))?,
        at_ms: at.parse().map_err(|_| format!("bad time `{at}`"))?,
    })
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub scenario: String,
    pub until_ms: u64,
    pub seed: Option<u64>,
    pub routing: Option<RoutingKind>,
    pub placement: Option<PlacementKind>,
    pub fail_nodes: Vec<ScriptedFailure>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub until_ms: u64,
    pub routing_strategy: RoutingKind,
    pub placement_strategy: PlacementKind,
    pub events_logged: usize,
    pub queue_length: usize,
    pub live_instances: usize,
    pub live_nodes: usize,
    pub stats: CumulativeStats,
}

pub fn run(opts: &RunOptions) -> Result<RunSummary> {
    let scenario = load_config_source(&opts.scenario)?;
    let mut config = scenario.config;
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    if let Some(r) = opts.routing {
        config.routing_strategy = r;
    }
    if let Some(p) = opts.placement {
        config.placement_strategy = p;
    }
    config.node_failures.extend(opts.fail_nodes.iter().cloned());
    let mut sim = Simulation::new(config)?;
    sim.run_until(SimTime(opts.until_ms));

    fs::create_dir_all(&opts.out).with_context(|| format!("creating {}", opts.out.display()))?;
    fs::write(opts.out.join("export.csv"), sim.export_csv())?;
    write_log(&opts.out.join("events.ndjson"), &sim)?;

    let summary = RunSummary {
        scenario: scenario.name,
        seed: sim.config().seed,
        until_ms: opts.until_ms,
        routing_strategy: sim.config().routing_strategy,
        placement_strategy: sim.config().placement_strategy,
        events_logged: sim.log().len(),
        queue_length: sim.queued().len(),
        live_instances: sim.instances().filter(|i| i.state.is_live()).count(),
        live_nodes: sim.nodes().filter(|n| n.state.is_live()).count(),
        stats: sim.cumulative_stats(),
    };
    write_json(&opts.out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct BattlegroundOptions {
    pub config_a: String,
    pub config_b: Option<String>,
    pub until_ms: u64,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

pub fn battleground(opts: &BattlegroundOptions) -> Result<ComparisonReport> {
    let a = load_config_source(&opts.config_a)?;
    let config_b = match &opts.config_b {
        Some(source) => load_config_source(source)?.config,
        None => match a.config_b.clone() {
            Some(b) => b,
            None => bail!("`{}` has no second config; pass --config-b", opts.config_a),
        },
    };
    let seed = opts.seed.unwrap_or(a.config.seed);
    let mut bg = Battleground::create(a.config, config_b, seed)?;
    bg.advance_to(SimTime(opts.until_ms));

    fs::create_dir_all(&opts.out).with_context(|| format!("creating {}", opts.out.display()))?;
    let report = bg.report();
    write_json(&opts.out.join("report.json"), &report)?;
    fs::write(opts.out.join("export.csv"), bg.export_csv())?;
    for label in ArenaLabel::BOTH {
        write_log(
            &opts.out.join(format!("events-{label}.ndjson")),
            &bg.arena(label).sim,
        )?;
    }
    Ok(report)
}

fn write_log(path: &Path, sim: &Simulation) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    sim.write_log_ndjson(&mut out)?;
    out.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
