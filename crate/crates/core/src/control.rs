//! Command surface shared by the HTTP service and the CLI.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::battleground::{ArenaLabel, Battleground, BattlegroundError};
use crate::config::{ConfigError, SimConfig};
use crate::ids::NodeId;
use crate::kernel::SimTime;
use crate::metrics::{LiveSnapshot, MetricsReport};
use crate::sim::{CommandOutcome, SimCommand, SimError, Simulation, StreamItem};
use crate::workload::WorkloadSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Action {
    Start,
    Pause,
    /// Rebuilds the current mode from scratch. A config switches to a
    /// single arena running it.
    Reset {
        #[serde(default)]
        config: Option<Box<SimConfig>>,
    },
    UpdateConfig {
        config: Value,
    },
    InjectRequests {
        #[serde(default = "one")]
        n: u32,
        #[serde(default)]
        function_type: Option<String>,
    },
    FailNode {
        node_id: NodeId,
    },
    ResetSession,
    ExportCsv,
    CreateBattleground {
        #[serde(default)]
        config_a: Option<Box<SimConfig>>,
        #[serde(default)]
        config_b: Option<Box<SimConfig>>,
        #[serde(default)]
        seed: Option<u64>,
    },
    StepLockstep {
        dt_ms: u64,
    },
}

fn one() -> u32 {
    1
}

const KINDS: &[&str] = &[
    "Start",
    "Pause",
    "Reset",
    "UpdateConfig",
    "InjectRequests",
    "FailNode",
    "ResetSession",
    "ExportCsv",
    "CreateBattleground",
    "StepLockstep",
];

/// A control message: `{"kind": ..., "arena": "A"|"B"|null, ...fields}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlCommand {
    #[serde(flatten)]
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arena: Option<ArenaLabel>,
}

impl ControlCommand {
    pub fn new(action: Action) -> Self {
        Self {
            action,
            arena: None,
        }
    }

    pub fn for_arena(action: Action, arena: ArenaLabel) -> Self {
        Self {
            action,
            arena: Some(arena),
        }
    }

    /// Parses a JSON message, telling unknown kinds apart from malformed
    /// payloads.
    pub fn from_json(value: Value) -> Result<Self, ControlError> {
        let kind = value
            .get("kind")
            .and_then(Value::as_str)
            .ok_or_else(|| ControlError::InvalidCommand("missing string field `kind`".into()))?;
        if !KINDS.contains(&kind) {
            return Err(ControlError::UnknownCommand(kind.to_string()));
        }
        serde_json::from_value(value).map_err(|e| ControlError::InvalidCommand(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ControlError {
    #[error("unknown command `{0}`")]
    UnknownCommand(String),
    #[error("malformed command: {0}")]
    InvalidCommand(String),
    #[error(transparent)]
    InvalidConfig(#[from] ConfigError),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is not active")]
    NodeNotActive(NodeId),
    #[error("unknown function type `{0}`")]
    UnknownFunctionType(String),
    #[error("{0}")]
    Battleground(#[from] BattlegroundError),
    #[error("{0} needs battleground mode")]
    NotInBattleground(&'static str),
    #[error("battleground mode: address the command to arena A or B")]
    ArenaRequired,
}

impl From<SimError> for ControlError {
    fn from(e: SimError) -> Self {
        use crate::faults::FaultError;
        use crate::workload::WorkloadError;
        match e {
            SimError::Config(c) => ControlError::InvalidConfig(c),
            SimError::Workload(WorkloadError::UnknownFunctionType(t)) => {
                ControlError::UnknownFunctionType(t)
            }
            SimError::Workload(w) => ControlError::InvalidConfig(ConfigError(w.to_string())),
            SimError::Fault(FaultError::UnknownNode(n)) => ControlError::UnknownNode(n),
            SimError::Fault(FaultError::NodeNotActive(n)) => ControlError::NodeNotActive(n),
        }
    }
}

impl ControlError {
    /// Stable machine-readable name.
    pub fn code(&self) -> &'static str {
        match self {
            ControlError::UnknownCommand(_) => "UnknownCommand",
            ControlError::InvalidCommand(_) => "InvalidCommand",
            ControlError::InvalidConfig(_) | ControlError::Battleground(_) => "InvalidConfig",
            ControlError::UnknownNode(_) => "UnknownNode",
            ControlError::NodeNotActive(_) => "NodeNotActive",
            ControlError::UnknownFunctionType(_) => "UnknownFunctionType",
            ControlError::NotInBattleground(_) => "NotInBattleground",
            ControlError::ArenaRequired => "ArenaRequired",
        }
    }
}

/// Acknowledgement of an applied command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ack {
    pub ok: bool,
    pub kind: String,
    pub time_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arena: Option<ArenaLabel>,
    #[serde(skip_serializing_if = "Value::is_null")]
    pub result: Value,
}

pub enum Mode {
    Single(Box<Simulation>),
    Battleground(Box<Battleground>),
}

/// Owns the running arena(s) and the run/pause flag.
pub struct Controller {
    mode: Mode,
    running: bool,
}

impl Controller {
    pub fn new(config: SimConfig) -> Result<Self, ConfigError> {
        let mut sim = Simulation::new(config)?;
        sim.enable_stream();
        Ok(Self {
            mode: Mode::Single(Box::new(sim)),
            running: false,
        })
    }

    pub fn mode(&self) -> &Mode {
        &self.mode
    }

    pub fn is_running(&self) -> bool {
        self.running
    }

    pub fn is_battleground(&self) -> bool {
        matches!(self.mode, Mode::Battleground(_))
    }

    pub fn simulation(&self) -> Option<&Simulation> {
        match &self.mode {
            Mode::Single(s) => Some(s),
            Mode::Battleground(_) => None,
        }
    }

    pub fn battleground(&self) -> Option<&Battleground> {
        match &self.mode {
            Mode::Battleground(b) => Some(b),
            Mode::Single(_) => None,
        }
    }

    pub fn now(&self) -> SimTime {
        match &self.mode {
            Mode::Single(s) => s.now(),
            Mode::Battleground(b) => b.now(),
        }
    }

    /// Simulated ms per wall-clock second (arena A's setting in battleground
    /// mode).
    pub fn pace(&self) -> f64 {
        match &self.mode {
            Mode::Single(s) => s.config().pace,
            Mode::Battleground(b) => b.arena(ArenaLabel::A).sim.config().pace,
        }
    }

    /// Time of the next pending event in any arena.
    pub fn next_event_time(&mut self) -> Option<SimTime> {
        match &mut self.mode {
            Mode::Single(s) => s.next_event_time(),
            Mode::Battleground(b) => {
                let [a, bb] = ArenaLabel::BOTH;
                let ta = b.arena_mut(a).sim.next_event_time();
                let tb = b.arena_mut(bb).sim.next_event_time();
                match (ta, tb) {
                    (Some(x), Some(y)) => Some(x.min(y)),
                    (x, y) => x.or(y),
                }
            }
        }
    }

    pub fn advance_to(&mut self, target: SimTime) -> usize {
        match &mut self.mode {
            Mode::Single(s) => s.run_until(target),
            Mode::Battleground(b) => {
                let (x, y) = b.advance_to(target);
                x + y
            }
        }
    }

    /// Buffered stream items, tagged with their arena in battleground mode.
    pub fn take_stream(&mut self) -> Vec<(Option<ArenaLabel>, StreamItem)> {
        match &mut self.mode {
            Mode::Single(s) => s.take_stream().into_iter().map(|i| (None, i)).collect(),
            Mode::Battleground(b) => {
                let mut out = Vec::new();
                for label in ArenaLabel::BOTH {
                    let items = b.arena_mut(label).sim.take_stream();
                    out.extend(items.into_iter().map(|i| (Some(label), i)));
                }
                out
            }
        }
    }

    pub fn snapshot(&self) -> Vec<(Option<ArenaLabel>, LiveSnapshot)> {
        match &self.mode {
            Mode::Single(s) => vec![(None, s.snapshot())],
            Mode::Battleground(b) => ArenaLabel::BOTH
                .iter()
                .map(|l| (Some(*l), b.arena(*l).sim.snapshot()))
                .collect(),
        }
    }

    pub fn metrics(&self) -> Vec<(Option<ArenaLabel>, MetricsReport)> {
        match &self.mode {
            Mode::Single(s) => vec![(None, s.metrics_report())],
            Mode::Battleground(b) => ArenaLabel::BOTH
                .iter()
                .map(|l| (Some(*l), b.arena(*l).sim.metrics_report()))
                .collect(),
        }
    }

    pub fn export_csv(&self) -> String {
        match &self.mode {
            Mode::Single(s) => s.export_csv(),
            Mode::Battleground(b) => b.export_csv(),
        }
    }

    /// Applies one command. Every command gets exactly one `Ok` or `Err`.
    pub fn apply_command(&mut self, cmd: ControlCommand) -> Result<Ack, ControlError> {
        let kind = kind_name(&cmd.action);
        let arena = cmd.arena;
        let result = match cmd.action {
            Action::Start => {
                self.running = true;
                Value::Null
            }
            Action::Pause => {
                self.running = false;
                Value::Null
            }
            Action::Reset { config } => {
                self.reset(config.map(|c| *c))?;
                Value::Null
            }
            Action::ExportCsv => Value::String(self.export_csv()),
            Action::CreateBattleground {
                config_a,
                config_b,
                seed,
            } => {
                let base = match &self.mode {
                    Mode::Single(s) => s.config().clone(),
                    Mode::Battleground(b) => b.arena(ArenaLabel::A).sim.config().clone(),
                };
                let config_a = config_a.map_or_else(|| base.clone(), |c| *c);
                let config_b = config_b.map_or_else(|| config_a.clone(), |c| *c);
                let seed = seed.unwrap_or(config_a.seed);
                let mut bg = Battleground::create(config_a, config_b, seed)?;
                for label in ArenaLabel::BOTH {
                    bg.arena_mut(label).sim.enable_stream();
                }
                self.mode = Mode::Battleground(Box::new(bg));
                Value::Null
            }
            Action::StepLockstep { dt_ms } => {
                let Mode::Battleground(b) = &mut self.mode else {
                    return Err(ControlError::NotInBattleground("StepLockstep"));
                };
                let (ea, eb) = b.step_lockstep(dt_ms);
                serde_json::json!({ "events_a": ea, "events_b": eb })
            }
            Action::UpdateConfig { config } => {
                self.sim_command(arena, SimCommand::UpdateConfig { config })?
            }
            Action::InjectRequests { n, function_type } => {
                self.sim_command(arena, SimCommand::InjectRequests { n, function_type })?
            }
            Action::FailNode { node_id } => {
                self.sim_command(arena, SimCommand::FailNode { node_id })?
            }
            Action::ResetSession => self.sim_command(arena, SimCommand::ResetSession)?,
        };
        Ok(Ack {
            ok: true,
            kind: kind.to_string(),
            time_ms: self.now().millis(),
            arena,
            result,
        })
    }

    fn reset(&mut self, config: Option<SimConfig>) -> Result<(), ControlError> {
        self.running = false;
        let next = match (&self.mode, config) {
            (_, Some(cfg)) => {
                let mut sim = Simulation::new(cfg)?;
                sim.enable_stream();
                Mode::Single(Box::new(sim))
            }
            (Mode::Single(s), None) => {
                let mut sim = Simulation::new(s.config().clone())?;
                sim.enable_stream();
                Mode::Single(Box::new(sim))
            }
            (Mode::Battleground(b), None) => {
                let mut a = b.arena(ArenaLabel::A).sim.config().clone();
                a.workload = b.workload().clone();
                let bcfg = b.arena(ArenaLabel::B).sim.config().clone();
                let mut bg = Battleground::create(a, bcfg, b.seed())?;
                for label in ArenaLabel::BOTH {
                    bg.arena_mut(label).sim.enable_stream();
                }
                Mode::Battleground(Box::new(bg))
            }
        };
        self.mode = next;
        Ok(())
    }

    fn sim_command(
        &mut self,
        arena: Option<ArenaLabel>,
        command: SimCommand,
    ) -> Result<Value, ControlError> {
        let outcome: CommandOutcome = match (&mut self.mode, arena) {
            (Mode::Single(s), _) => s.apply(command)?,
            (Mode::Battleground(b), Some(label)) => b.apply(label, command)?,
            (Mode::Battleground(b), None) => return apply_to_both(b, command),
        };
        Ok(serde_json::to_value(outcome).expect("outcomes serialise"))
    }
}

/// Unlabelled commands in battleground mode: config changes go to both
/// arenas (a workload change replaces the shared schedule); anything
/// arena-specific needs a label.
fn apply_to_both(b: &mut Battleground, command: SimCommand) -> Result<Value, ControlError> {
    match command {
        SimCommand::UpdateConfig { config } => {
            for label in ArenaLabel::BOTH {
                b.arena(label).sim.config().merged(&config)?;
            }
            if let Some(w) = config.get("workload") {
                let mut spec = serde_json::to_value(b.workload()).expect("spec serialises");
                merge_into(&mut spec, w);
                let spec: WorkloadSpec =
                    serde_json::from_value(spec).map_err(|e| ConfigError(e.to_string()))?;
                b.set_workload(spec)?;
            }
            for label in ArenaLabel::BOTH {
                b.apply(
                    label,
                    SimCommand::UpdateConfig {
                        config: config.clone(),
                    },
                )?;
            }
            Ok(Value::Null)
        }
        SimCommand::ResetSession => {
            for label in ArenaLabel::BOTH {
                b.apply(label, SimCommand::ResetSession)?;
            }
            Ok(Value::Null)
        }
        _ => Err(ControlError::ArenaRequired),
    }
}

fn merge_into(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge_into(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

fn kind_name(action: &Action) -> &'static str {
    match action {
        Action::Start => "Start",
        Action::Pause => "Pause",
        Action::Reset { .. } => "Reset",
        Action::UpdateConfig { .. } => "UpdateConfig",
        Action::InjectRequests { .. } => "InjectRequests",
        Action::FailNode { .. } => "FailNode",
        Action::ResetSession => "ResetSession",
        Action::ExportCsv => "ExportCsv",
        Action::CreateBattleground { .. } => "CreateBattleground",
        Action::StepLockstep { .. } => "StepLockstep",
    }
}
