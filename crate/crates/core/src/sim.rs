//! The arena engine: registries, event handling, commands and replay.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{ConfigError, SimConfig};
use crate::dispatch::{DispatchQueue, RoutingPolicy};
use crate::faults::{FailureReport, FaultError};
use crate::ids::{InstanceId, NodeId, RequestId};
use crate::kernel::{EventId, EventKind, Kernel, LogRecord, SimEvent, SimRng, SimTime, Subject};
use crate::lifecycle::{FunctionInstance, InstanceState};
use crate::metrics::MetricsCollector;
use crate::placement::{ComputeNode, NodeState, PlacementError, PlacementPolicy};
use crate::request::{Request, RequestStatus};
use crate::workload::{ArrivalGenerator, WorkloadError};

#[derive(Debug, Clone, Default)]
pub(crate) struct IdAllocator {
    request: u64,
    instance: u64,
    node: u64,
}

impl IdAllocator {
    pub fn next_request(&mut self) -> RequestId {
        self.request += 1;
        RequestId(self.request)
    }

    pub fn next_instance(&mut self) -> InstanceId {
        self.instance += 1;
        InstanceId(self.instance)
    }

    pub fn next_node(&mut self) -> NodeId {
        self.node += 1;
        NodeId(self.node)
    }
}

/// A coarse state change, streamed to clients after the event that caused it.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "entity", rename_all = "snake_case")]
pub enum StateDelta {
    Request {
        time_ms: u64,
        id: RequestId,
        function_type: String,
        status: RequestStatus,
        instance_id: Option<InstanceId>,
    },
    Instance {
        time_ms: u64,
        id: InstanceId,
        function_type: String,
        node_id: NodeId,
        state: InstanceState,
        colour: &'static str,
        in_flight: u32,
    },
    Node {
        time_ms: u64,
        id: NodeId,
        state: NodeState,
        cpu_used: f64,
        mem_used_mb: u64,
    },
}

/// One message of the event stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamItem {
    Event(LogRecord),
    Delta(StateDelta),
}

/// Commands that change an arena after construction. Accepted commands are
/// logged so a run can be replayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum SimCommand {
    UpdateConfig {
        config: Value,
    },
    InjectRequests {
        n: u32,
        #[serde(default)]
        function_type: Option<String>,
    },
    FailNode {
        node_id: NodeId,
    },
    ResetSession,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub time_ms: u64,
    pub command: SimCommand,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum CommandOutcome {
    ConfigUpdated,
    Injected { request_ids: Vec<RequestId> },
    NodeFailed { report: FailureReport },
    SessionReset,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Fault(#[from] FaultError),
}

pub struct Simulation {
    pub(crate) config: SimConfig,
    pub(crate) kernel: Kernel,
    pub(crate) rng: SimRng,
    pub(crate) routing: Box<dyn RoutingPolicy>,
    pub(crate) placement: Box<dyn PlacementPolicy>,
    pub(crate) ids: IdAllocator,
    workload: Option<ArrivalGenerator>,
    /// Function type of each scheduled, not yet processed arrival.
    pending_arrivals: HashMap<RequestId, String>,
    /// The lazily scheduled next arrival of the internal workload.
    auto_arrival: Option<(EventId, RequestId)>,
    pub(crate) requests: BTreeMap<RequestId, Request>,
    pub(crate) queue: DispatchQueue,
    pub(crate) instances: BTreeMap<InstanceId, FunctionInstance>,
    pub(crate) nodes: BTreeMap<NodeId, ComputeNode>,
    pub(crate) metrics: MetricsCollector,
    pub(crate) sweep_event: Option<EventId>,
    command_log: Vec<CommandRecord>,
    outbox: Option<Vec<StreamItem>>,
}

impl std::fmt::Debug for Simulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulation")
            .field("now", &self.now())
            .field("requests", &self.requests.len())
            .field("queue", &self.queue.len())
            .field("instances", &self.instances.len())
            .field("nodes", &self.nodes.len())
            .finish_non_exhaustive()
    }
}

impl Simulation {
    /// An arena driven by its configured workload.
    pub fn new(config: SimConfig) -> Result<Self, ConfigError> {
        let mut sim = Self::build(config, true)?;
        sim.schedule_next_auto();
        Ok(sim)
    }

    /// An arena whose arrivals are all supplied through
    /// [`Simulation::schedule_arrival`].
    pub fn externally_fed(config: SimConfig) -> Result<Self, ConfigError> {
        Self::build(config, false)
    }

    fn build(config: SimConfig, internal_workload: bool) -> Result<Self, ConfigError> {
        config.validate()?;
        let workload =
            internal_workload.then(|| ArrivalGenerator::new(config.workload.clone(), config.seed));
        let mut sim = Self {
            kernel: Kernel::new(),
            rng: SimRng::new(config.seed, SimRng::EXECUTION_STREAM),
            routing: config.routing_strategy.policy(),
            placement: Box::new(config.placement_strategy),
            ids: IdAllocator::default(),
            workload,
            pending_arrivals: HashMap::new(),
            auto_arrival: None,
            requests: BTreeMap::new(),
            queue: DispatchQueue::default(),
            instances: BTreeMap::new(),
            nodes: BTreeMap::new(),
            metrics: MetricsCollector::new(config.sample_interval_ms),
            sweep_event: None,
            command_log: Vec::new(),
            outbox: None,
            config,
        };
        sim.schedule_scripted_failures();
        Ok(sim)
    }

    pub fn now(&self) -> SimTime {
        self.kernel.now()
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn log(&self) -> &[LogRecord] {
        self.kernel.log()
    }

    pub fn write_log_ndjson<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        self.kernel.write_ndjson(out)
    }

    pub fn command_log(&self) -> &[CommandRecord] {
        &self.command_log
    }

    pub fn requests(&self) -> impl Iterator<Item = &Request> {
        self.requests.values()
    }

    pub fn request(&self, id: RequestId) -> Option<&Request> {
        self.requests.get(&id)
    }

    pub fn instances(&self) -> impl Iterator<Item = &FunctionInstance> {
        self.instances.values()
    }

    pub fn instance(&self, id: InstanceId) -> Option<&FunctionInstance> {
        self.instances.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &ComputeNode> {
        self.nodes.values()
    }

    pub fn node(&self, id: NodeId) -> Option<&ComputeNode> {
        self.nodes.get(&id)
    }

    /// Request ids waiting in the dispatcher, head first.
    pub fn queued(&self) -> Vec<RequestId> {
        self.queue.iter().map(|e| e.request).collect()
    }

    pub fn next_event_time(&mut self) -> Option<SimTime> {
        self.kernel.peek_time()
    }

    /// Starts buffering stream items; see [`Simulation::take_stream`].
    pub fn enable_stream(&mut self) {
        if self.outbox.is_none() {
            self.outbox = Some(Vec::new());
        }
    }

    pub fn take_stream(&mut self) -> Vec<StreamItem> {
        self.outbox.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Processes the next event. Samples due strictly before it are taken
    /// first.
    pub fn step(&mut self) -> Option<SimEvent> {
        let t = self.kernel.peek_time()?;
        self.flush_samples(|s| s < t);
        let mark = self.outbox.as_ref().map(Vec::len);
        let event = self.kernel.pop()?;
        let seq = self.kernel.log().len() - 1;
        self.handle(&event);
        if let (Some(mark), Some(outbox)) = (mark, self.outbox.as_mut()) {
            outbox.insert(mark, StreamItem::Event(self.kernel.log()[seq].clone()));
        }
        Some(event)
    }

    /// Processes every event with `time <= until` and parks the clock there.
    /// Returns the number of events processed.
    pub fn run_until(&mut self, until: SimTime) -> usize {
        let mut processed = 0;
        while self.kernel.peek_time().is_some_and(|t| t <= until) {
            self.step();
            processed += 1;
        }
        self.kernel.advance_to(until);
        self.flush_samples(|s| s <= until);
        processed
    }

    fn flush_samples(&mut self, due: impl Fn(SimTime) -> bool) {
        while due(self.metrics.next_sample_at()) {
            let at = self.metrics.next_sample_at();
            let point = self.sample_point(at);
            self.metrics.push_sample(point);
        }
    }

    fn handle(&mut self, event: &SimEvent) {
        match (event.kind, event.subject) {
            (EventKind::RequestArrival, Subject::Request(r)) => self.on_arrival(r),
            (EventKind::ColdStartComplete, Subject::Instance(i)) => {
                self.complete_cold_start(i)
                    .expect("cold starts of failed instances are cancelled");
                self.drain();
            }
            (EventKind::ExecutionComplete, Subject::Request(r)) => {
                self.complete(r)
                    .expect("completions of failed requests are cancelled");
                self.drain();
            }
            (EventKind::TtlExpiry, Subject::Request(r)) => {
                self.expire_ttl(r);
                self.drain();
            }
            (EventKind::ExecutionTimeout, Subject::Request(r)) => {
                self.execution_timeout(r);
                self.drain();
            }
            (EventKind::InactivityCheck, _) => {
                self.on_inactivity_check();
                self.drain();
            }
            (EventKind::NodeProvisioned, Subject::Node(n)) => self.activate_node(n),
            (EventKind::NodeFailed, Subject::Node(n)) => {
                self.on_node_failed_event(n);
                self.drain();
            }
            (kind, subject) => unreachable!("no handler for {kind:?} on {subject}"),
        }
    }

    fn on_arrival(&mut self, id: RequestId) {
        let now = self.now();
        let function_type = self
            .pending_arrivals
            .remove(&id)
            .expect("arrival was scheduled");
        self.requests
            .insert(id, Request::new(id, function_type, now));
        self.metrics.record_created();
        let ttl = self.config.request_ttl_ms;
        self.enqueue(id, ttl).expect("fresh request");
        self.drain();
        if self.auto_arrival.is_some_and(|(_, r)| r == id) {
            self.auto_arrival = None;
            self.schedule_next_auto();
        }
    }

    fn schedule_next_auto(&mut self) {
        let Some(arrival) = self.workload.as_mut().and_then(Iterator::next) else {
            return;
        };
        let at = arrival.time.max(self.now());
        self.auto_arrival = Some(self.schedule_request(at, arrival.function_type));
    }

    fn schedule_request(&mut self, at: SimTime, function_type: String) -> (EventId, RequestId) {
        let id = self.ids.next_request();
        self.pending_arrivals.insert(id, function_type);
        let event = self
            .kernel
            .schedule(at, EventKind::RequestArrival, Subject::Request(id))
            .expect("arrival is not in the past");
        (event, id)
    }

    /// Schedules an externally generated arrival.
    pub fn schedule_arrival(
        &mut self,
        at: SimTime,
        function_type: &str,
    ) -> Result<RequestId, WorkloadError> {
        if self.config.exec_base_for(function_type).is_none() {
            return Err(WorkloadError::UnknownFunctionType(
                function_type.to_string(),
            ));
        }
        if at < self.now() {
            return Err(WorkloadError::InvalidSpec(format!(
                "arrival at {at} is before the clock ({})",
                self.now()
            )));
        }
        Ok(self.schedule_request(at, function_type.to_string()).1)
    }

    /// Schedules `n` arrivals at the current time. Without a type, the first
    /// known function type is used.
    pub fn inject(
        &mut self,
        n: u32,
        function_type: Option<&str>,
    ) -> Result<Vec<RequestId>, WorkloadError> {
        let ty = match function_type {
            Some(t) => t.to_string(),
            None => self
                .config
                .workload
                .function_types()
                .next()
                .or_else(|| self.config.exec_base_ms.keys().next().map(String::as_str))
                .expect("config defines a function type")
                .to_string(),
        };
        let now = self.now();
        (0..n).map(|_| self.schedule_arrival(now, &ty)).collect()
    }

    /// Provisions a node, which becomes active after the startup delay.
    pub fn provision_node(&mut self) -> Result<NodeId, PlacementError> {
        let live = self.nodes.values().filter(|n| n.state.is_live()).count() as u32;
        if live >= self.config.max_nodes {
            return Err(PlacementError::NodeLimitReached(self.config.max_nodes));
        }
        let now = self.now();
        let id = self.ids.next_node();
        let ready = now + self.config.node_startup_delay_ms;
        self.nodes.insert(
            id,
            ComputeNode::starting(id, self.config.node_capacity, now, ready),
        );
        self.kernel
            .schedule(ready, EventKind::NodeProvisioned, Subject::Node(id))
            .expect("future event");
        self.emit_node_delta(id);
        self.ensure_sweep();
        Ok(id)
    }

    fn activate_node(&mut self, id: NodeId) {
        let now = self.now();
        let Some(node) = self.nodes.get_mut(&id) else {
            return;
        };
        if node.state != NodeState::Provisioning {
            return;
        }
        node.state = NodeState::Active;
        node.active_at = Some(now);
        if node.hosted.is_empty() {
            node.last_active_at = now;
        }
        self.emit_node_delta(id);
    }

    /// Applies a command at the current time, after every event due by now
    /// has been processed.
    pub fn apply(&mut self, command: SimCommand) -> Result<CommandOutcome, SimError> {
        let now = self.now();
        self.run_until(now);
        let outcome = match &command {
            SimCommand::UpdateConfig { config } => {
                self.update_config(config)?;
                CommandOutcome::ConfigUpdated
            }
            SimCommand::InjectRequests { n, function_type } => CommandOutcome::Injected {
                request_ids: self.inject(*n, function_type.as_deref())?,
            },
            SimCommand::FailNode { node_id } => {
                let report = self.fail_node(*node_id)?;
                self.drain();
                CommandOutcome::NodeFailed { report }
            }
            SimCommand::ResetSession => {
                self.reset_session();
                CommandOutcome::SessionReset
            }
        };
        let subject = match &command {
            SimCommand::FailNode { node_id } => Subject::Node(*node_id),
            _ => Subject::None,
        };
        let detail = serde_json::to_string(&command).expect("commands serialise");
        let seq = self.kernel.log().len();
        self.kernel
            .record(EventKind::Command, subject, Some(detail));
        if let Some(outbox) = self.outbox.as_mut() {
            outbox.push(StreamItem::Event(self.kernel.log()[seq].clone()));
        }
        self.command_log.push(CommandRecord {
            time_ms: now.millis(),
            command,
        });
        Ok(outcome)
    }

    /// Merges a partial config. Only future decisions see the change; events
    /// already scheduled keep their times.
    fn update_config(&mut self, patch: &Value) -> Result<(), ConfigError> {
        let next = self.config.merged(patch)?;
        if next.routing_strategy != self.config.routing_strategy {
            self.routing = next.routing_strategy.policy();
        }
        if next.placement_strategy != self.config.placement_strategy {
            self.placement = Box::new(next.placement_strategy);
        }
        if next.sample_interval_ms != self.config.sample_interval_ms {
            self.metrics.set_interval(next.sample_interval_ms);
        }
        let added: Vec<_> = next
            .node_failures
            .iter()
            .filter(|f| !self.config.node_failures.contains(f))
            .cloned()
            .collect();
        let workload_changed = next.workload != self.config.workload;
        self.config = next;
        for f in added {
            let at = SimTime(f.at_ms).max(self.now());
            self.kernel
                .schedule(at, EventKind::NodeFailed, Subject::Node(f.node))
                .expect("not in the past");
        }
        if workload_changed && self.workload.is_some() {
            self.restart_workload();
        }
        self.drain();
        Ok(())
    }

    /// Replaces the internal arrival source, continuing after the current
    /// time on the new schedule.
    fn restart_workload(&mut self) {
        if let Some((event, id)) = self.auto_arrival.take() {
            self.kernel.cancel(event);
            self.pending_arrivals.remove(&id);
        }
        let now = self.now();
        let mut generator = ArrivalGenerator::new(self.config.workload.clone(), self.config.seed);
        while generator.peek_time().is_some_and(|t| t <= now) {
            generator.next();
        }
        self.workload = Some(generator);
        self.schedule_next_auto();
    }

    /// Rebuilds an arena from its initial config and command log, running to
    /// `until`.
    pub fn replay(
        config: SimConfig,
        commands: &[CommandRecord],
        until: SimTime,
    ) -> Result<Simulation, SimError> {
        let mut sim = Simulation::new(config)?;
        for record in commands {
            sim.run_until(SimTime(record.time_ms));
            sim.apply(record.command.clone())?;
        }
        sim.run_until(until);
        Ok(sim)
    }

    /// Hash over the complete observable state.
    pub fn state_digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.now().hash(&mut h);
        self.export_csv().hash(&mut h);
        self.queued().hash(&mut h);
        for record in self.kernel.log() {
            serde_json::to_string(record)
                .expect("serialises")
                .hash(&mut h);
        }
        serde_json::to_string(&self.metrics_report())
            .expect("serialises")
            .hash(&mut h);
        h.finish()
    }

    pub(crate) fn emit_request_delta(&mut self, id: RequestId) {
        let Some(outbox) = self.outbox.as_mut() else {
            return;
        };
        let r = &self.requests[&id];
        outbox.push(StreamItem::Delta(StateDelta::Request {
            time_ms: self.kernel.now().millis(),
            id,
            function_type: r.function_type.clone(),
            status: r.status,
            instance_id: r.assigned_instance,
        }));
    }

    pub(crate) fn emit_instance_delta(&mut self, id: InstanceId) {
        let Some(outbox) = self.outbox.as_mut() else {
            return;
        };
        let i = &self.instances[&id];
        outbox.push(StreamItem::Delta(StateDelta::Instance {
            time_ms: self.kernel.now().millis(),
            id,
            function_type: i.function_type.clone(),
            node_id: i.node_id,
            state: i.state,
            colour: i.state.colour(),
            in_flight: i.in_flight.len() as u32,
        }));
    }

    pub(crate) fn emit_node_delta(&mut self, id: NodeId) {
        let Some(outbox) = self.outbox.as_mut() else {
            return;
        };
        let n = &self.nodes[&id];
        outbox.push(StreamItem::Delta(StateDelta::Node {
            time_ms: self.kernel.now().millis(),
            id,
            state: n.state,
            cpu_used: n.used.cpu_millis as f64 / 1000.0,
            mem_used_mb: n.used.mem_mb,
        }));
    }
}
