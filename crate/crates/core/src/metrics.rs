//! Counters, sampled series, the cost model and CSV export.

use std::collections::VecDeque;
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use serde::{Serialize, Serializer};

use crate::config::format_vcpu;
use crate::ids::{InstanceId, NodeId, RequestId};
use crate::kernel::SimTime;
use crate::lifecycle::InstanceState;
use crate::placement::NodeState;
use crate::request::{Request, RequestStatus};
use crate::sim::Simulation;

/// Cost in MB·seconds, held exactly as integer thousandths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cost(u128);

impl Cost {
    pub const ZERO: Cost = Cost(0);

    pub fn from_thousandths(t: u128) -> Self {
        Cost(t)
    }

    pub fn thousandths(self) -> u128 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    /// Parses a plain decimal with at most three fractional digits.
    pub fn parse(s: &str) -> Option<Cost> {
        let (whole, frac) = s.split_once('.').unwrap_or((s, ""));
        if whole.is_empty() || frac.len() > 3 || !whole.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        if !frac.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let w: u128 = whole.parse().ok()?;
        let f: u128 = if frac.is_empty() {
            0
        } else {
            format!("{frac:0<3}").parse().ok()?
        };
        Some(Cost(w * 1000 + f))
    }
}

impl fmt::Display for Cost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let whole = self.0 / 1000;
        let frac = self.0 % 1000;
        if frac == 0 {
            write!(f, "{whole}")
        } else {
            let digits = format!("{frac:03}");
            write!(f, "{whole}.{}", digits.trim_end_matches('0'))
        }
    }
}

impl Add for Cost {
    type Output = Cost;
    fn add(self, rhs: Cost) -> Cost {
        Cost(self.0 + rhs.0)
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, rhs: Cost) {
        self.0 += rhs.0;
    }
}

impl Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::ZERO, Add::add)
    }
}

impl Serialize for Cost {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.as_f64())
    }
}

/// `(execution_ms / 1000) × memory_mb`, exact.
pub fn cost(execution_ms: u64, memory_mb: u64) -> Cost {
    Cost(execution_ms as u128 * memory_mb as u128)
}

fn mean(sum: u128, n: u64) -> Option<f64> {
    (n > 0).then(|| sum as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FailureCounts {
    pub ttl: u64,
    pub exec_timeout: u64,
    pub node_down: u64,
}

impl FailureCounts {
    pub fn total(&self) -> u64 {
        self.ttl + self.exec_timeout + self.node_down
    }
}

/// Whole-run aggregates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CumulativeStats {
    pub total_created: u64,
    pub total_succeeded: u64,
    pub total_failed: u64,
    pub failed_by_cause: FailureCounts,
    pub in_system: u64,
    pub cold_starts: u64,
    pub avg_end_to_end_ms: Option<f64>,
    pub avg_queue_wait_ms: Option<f64>,
    pub avg_execution_ms: Option<f64>,
    pub avg_cpu_utilisation: Option<f64>,
    pub avg_mem_utilisation: Option<f64>,
    pub samples: u64,
    pub cumulative_cost: Cost,
    /// `cumulative_cost` as an exact decimal string.
    pub cumulative_cost_exact: String,
}

/// Averages since the last session reset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionStats {
    pub started_at_ms: u64,
    pub completed: u64,
    pub avg_queue_wait_ms: Option<f64>,
    pub avg_execution_ms: Option<f64>,
    pub avg_cold_start_wait_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesPoint {
    pub time_ms: u64,
    pub queue_length: u64,
    pub active_instances: u64,
    pub cold_starting: u64,
    pub warm: u64,
    pub busy: u64,
    pub active_nodes: u64,
    pub cpu_utilisation: f64,
    pub mem_utilisation: f64,
    pub total_succeeded: u64,
    pub total_failed: u64,
    pub cumulative_cost: Cost,
    pub avg_end_to_end_ms: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Window {
    started_at: SimTime,
    completed: u64,
    queue_wait: u128,
    execution: u128,
    cold_wait: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsCollector {
    interval_ms: u64,
    next_sample: SimTime,
    created: u64,
    succeeded: u64,
    failed: FailureCounts,
    cold_starts: u64,
    sum_e2e: u128,
    sum_queue_wait: u128,
    sum_execution: u128,
    cost: Cost,
    cpu_util_sum: f64,
    mem_util_sum: f64,
    series: Vec<SeriesPoint>,
    session: Window,
    recent: VecDeque<RequestId>,
}

const RECENT_TAIL: usize = 20;

impl MetricsCollector {
    pub fn new(interval_ms: u64) -> Self {
        Self {
            interval_ms,
            next_sample: SimTime(interval_ms),
            created: 0,
            succeeded: 0,
            failed: FailureCounts::default(),
            cold_starts: 0,
            sum_e2e: 0,
            sum_queue_wait: 0,
            sum_execution: 0,
            cost: Cost::ZERO,
            cpu_util_sum: 0.0,
            mem_util_sum: 0.0,
            series: Vec::new(),
            session: Window::default(),
            recent: VecDeque::new(),
        }
    }

    pub fn series(&self) -> &[SeriesPoint] {
        &self.series
    }

    pub fn cumulative_cost(&self) -> Cost {
        self.cost
    }

    pub fn recent(&self) -> impl Iterator<Item = RequestId> + '_ {
        self.recent.iter().copied()
    }

    pub(crate) fn next_sample_at(&self) -> SimTime {
        self.next_sample
    }

    /// Takes effect after the next pending sample.
    pub(crate) fn set_interval(&mut self, interval_ms: u64) {
        self.interval_ms = interval_ms;
    }

    pub(crate) fn record_created(&mut self) {
        self.created += 1;
    }

    pub(crate) fn record_cold_start(&mut self) {
        self.cold_starts += 1;
    }

    /// Accounts a request that just reached a terminal status. `memory_mb`
    /// is the serving instance's demand; failures accrue no cost.
    pub(crate) fn record_terminal(&mut self, req: &Request, memory_mb: u64) {
        match req.status {
            RequestStatus::Succeeded => {
                let exec = req.execution_ms().unwrap_or(0);
                let wait = req.queue_wait_ms().unwrap_or(0);
                self.succeeded += 1;
                self.sum_e2e += req.end_to_end_ms().unwrap_or(0) as u128;
                self.sum_queue_wait += wait as u128;
                self.sum_execution += exec as u128;
                self.cost += cost(exec, memory_mb);
                self.session.completed += 1;
                self.session.queue_wait += wait as u128;
                self.session.execution += exec as u128;
                self.session.cold_wait += req.cold_start_wait_ms() as u128;
            }
            RequestStatus::FailedTtl => self.failed.ttl += 1,
            RequestStatus::FailedExecTimeout => self.failed.exec_timeout += 1,
            RequestStatus::FailedNodeDown => self.failed.node_down += 1,
            _ => return,
        }
        self.recent.push_back(req.id);
        if self.recent.len() > RECENT_TAIL {
            self.recent.pop_front();
        }
    }

    pub(crate) fn push_sample(&mut self, point: SeriesPoint) {
        self.cpu_util_sum += point.cpu_utilisation;
        self.mem_util_sum += point.mem_utilisation;
        self.series.push(point);
        self.next_sample = self.next_sample + self.interval_ms;
    }

    pub fn reset_session(&mut self, now: SimTime) {
        self.session = Window {
            started_at: now,
            ..Window::default()
        };
    }

    pub fn cumulative(&self) -> CumulativeStats {
        let n = self.series.len() as u64;
        let terminal = self.succeeded + self.failed.total();
        CumulativeStats {
            total_created: self.created,
            total_succeeded: self.succeeded,
            total_failed: self.failed.total(),
            failed_by_cause: self.failed,
            in_system: self.created - terminal,
            cold_starts: self.cold_starts,
            avg_end_to_end_ms: mean(self.sum_e2e, self.succeeded),
            avg_queue_wait_ms: mean(self.sum_queue_wait, self.succeeded),
            avg_execution_ms: mean(self.sum_execution, self.succeeded),
            avg_cpu_utilisation: (n > 0).then(|| self.cpu_util_sum / n as f64),
            avg_mem_utilisation: (n > 0).then(|| self.mem_util_sum / n as f64),
            samples: n,
            cumulative_cost: self.cost,
            cumulative_cost_exact: self.cost.to_string(),
        }
    }

    pub fn session(&self) -> SessionStats {
        let s = &self.session;
        SessionStats {
            started_at_ms: s.started_at.millis(),
            completed: s.completed,
            avg_queue_wait_ms: mean(s.queue_wait, s.completed),
            avg_execution_ms: mean(s.execution, s.completed),
            avg_cold_start_wait_ms: mean(s.cold_wait, s.completed),
        }
    }
}

/// Payload of `GET /metrics`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub time_ms: u64,
    pub cumulative: CumulativeStats,
    pub session: SessionStats,
    pub series: Vec<SeriesPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceRow {
    pub id: InstanceId,
    pub function_type: String,
    pub node_id: NodeId,
    pub state: InstanceState,
    pub colour: &'static str,
    pub in_flight: Vec<RequestId>,
    pub concurrency_limit: u32,
    pub requests_served: u64,
    pub created_ms: u64,
    pub ready_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeRow {
    pub id: NodeId,
    pub state: NodeState,
    pub cpu_used: f64,
    pub cpu_capacity: f64,
    pub mem_used_mb: u64,
    pub mem_capacity_mb: u64,
    pub instances: Vec<InstanceId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueueRow {
    pub request_id: RequestId,
    pub function_type: String,
    pub status: RequestStatus,
    pub enqueue_ms: u64,
    pub wait_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestRecord {
    pub request_id: RequestId,
    pub function_type: String,
    pub arrival_ms: u64,
    pub enqueue_ms: Option<u64>,
    pub dispatch_ms: Option<u64>,
    pub exec_start_ms: Option<u64>,
    pub end_ms: Option<u64>,
    pub status: RequestStatus,
    pub queue_wait_ms: Option<u64>,
    pub execution_ms: Option<u64>,
    pub end_to_end_ms: Option<u64>,
    pub cold_start_wait_ms: u64,
    pub cost_units: Option<Cost>,
    pub instance_id: Option<InstanceId>,
    pub node_id: Option<NodeId>,
}

/// Payload of `GET /state`: the registry at one instant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LiveSnapshot {
    pub time_ms: u64,
    pub queue_length: u64,
    pub queue: Vec<QueueRow>,
    pub instances: Vec<InstanceRow>,
    pub nodes: Vec<NodeRow>,
    pub recent_requests: Vec<RequestRecord>,
    pub stats: CumulativeStats,
    pub session: SessionStats,
}

impl Simulation {
    pub fn cumulative_stats(&self) -> CumulativeStats {
        self.metrics.cumulative()
    }

    pub fn session_stats(&self) -> SessionStats {
        self.metrics.session()
    }

    pub fn series(&self) -> &[SeriesPoint] {
        self.metrics.series()
    }

    pub fn metrics_report(&self) -> MetricsReport {
        MetricsReport {
            time_ms: self.now().millis(),
            cumulative: self.metrics.cumulative(),
            session: self.metrics.session(),
            series: self.metrics.series().to_vec(),
        }
    }

    /// Clears the session window; cumulative data is untouched.
    pub fn reset_session(&mut self) {
        let now = self.now();
        self.metrics.reset_session(now);
    }

    pub fn request_record(&self, id: RequestId) -> Option<RequestRecord> {
        let r = self.requests.get(&id)?;
        let cost_units = match r.status {
            RequestStatus::Succeeded => Some(cost(
                r.execution_ms().unwrap_or(0),
                self.memory_of(r.assigned_instance),
            )),
            st if st.is_terminal() => Some(Cost::ZERO),
            _ => None,
        };
        Some(RequestRecord {
            request_id: r.id,
            function_type: r.function_type.clone(),
            arrival_ms: r.arrival_time.millis(),
            enqueue_ms: r.enqueue_time.map(SimTime::millis),
            dispatch_ms: r.dispatch_time.map(SimTime::millis),
            exec_start_ms: r.exec_start_time.map(SimTime::millis),
            end_ms: r.end_time.map(SimTime::millis),
            status: r.status,
            queue_wait_ms: r.queue_wait_ms(),
            execution_ms: r.execution_ms(),
            end_to_end_ms: r.end_to_end_ms(),
            cold_start_wait_ms: r.cold_start_wait_ms(),
            cost_units,
            instance_id: r.assigned_instance,
            node_id: r.node_id,
        })
    }

    fn memory_of(&self, instance: Option<InstanceId>) -> u64 {
        instance
            .and_then(|i| self.instances.get(&i))
            .map_or(0, |i| i.demand.mem_mb)
    }

    pub fn snapshot(&self) -> LiveSnapshot {
        let now = self.now();
        let queue = self
            .queue
            .iter()
            .map(|e| {
                let r = &self.requests[&e.request];
                QueueRow {
                    request_id: e.request,
                    function_type: r.function_type.clone(),
                    status: r.status,
                    enqueue_ms: e.enqueue_time.millis(),
                    wait_ms: now.since(e.enqueue_time),
                }
            })
            .collect::<Vec<_>>();
        let instances = self
            .instances
            .values()
            .filter(|i| i.state.is_live())
            .map(|i| InstanceRow {
                id: i.id,
                function_type: i.function_type.clone(),
                node_id: i.node_id,
                state: i.state,
                colour: i.state.colour(),
                in_flight: i.in_flight.iter().copied().collect(),
                concurrency_limit: i.concurrency_limit,
                requests_served: i.requests_served,
                created_ms: i.created_at.millis(),
                ready_ms: i.cold_ready_at.millis(),
            })
            .collect();
        let nodes = self
            .nodes
            .values()
            .filter(|n| n.state != NodeState::Deprovisioned)
            .map(|n| NodeRow {
                id: n.id,
                state: n.state,
                cpu_used: n.used.cpu_millis as f64 / 1000.0,
                cpu_capacity: n.capacity.cpu_millis as f64 / 1000.0,
                mem_used_mb: n.used.mem_mb,
                mem_capacity_mb: n.capacity.mem_mb,
                instances: n.hosted.iter().copied().collect(),
            })
            .collect();
        LiveSnapshot {
            time_ms: now.millis(),
            queue_length: queue.len() as u64,
            queue,
            instances,
            nodes,
            recent_requests: self
                .metrics
                .recent()
                .filter_map(|id| self.request_record(id))
                .collect(),
            stats: self.metrics.cumulative(),
            session: self.metrics.session(),
        }
    }

    /// Series point for the registry as it stands.
    pub(crate) fn sample_point(&self, time: SimTime) -> SeriesPoint {
        let mut point = SeriesPoint {
            time_ms: time.millis(),
            queue_length: self.queue.len() as u64,
            active_instances: 0,
            cold_starting: 0,
            warm: 0,
            busy: 0,
            active_nodes: 0,
            cpu_utilisation: 0.0,
            mem_utilisation: 0.0,
            total_succeeded: 0,
            total_failed: 0,
            cumulative_cost: self.metrics.cumulative_cost(),
            avg_end_to_end_ms: None,
        };
        for i in self.instances.values() {
            match i.state {
                InstanceState::ColdStarting => point.cold_starting += 1,
                InstanceState::Warm => point.warm += 1,
                InstanceState::Busy => point.busy += 1,
                _ => continue,
            }
            point.active_instances += 1;
        }
        let (mut used_cpu, mut used_mem, mut cap_cpu, mut cap_mem) = (0u64, 0u64, 0u64, 0u64);
        for n in self.nodes.values().filter(|n| n.state.is_live()) {
            point.active_nodes += 1;
            used_cpu += n.used.cpu_millis;
            used_mem += n.used.mem_mb;
            cap_cpu += n.capacity.cpu_millis;
            cap_mem += n.capacity.mem_mb;
        }
        point.cpu_utilisation = utilisation(used_cpu, cap_cpu);
        point.mem_utilisation = utilisation(used_mem, cap_mem);
        let stats = self.metrics.cumulative();
        point.total_succeeded = stats.total_succeeded;
        point.total_failed = stats.total_failed;
        point.avg_end_to_end_ms = stats.avg_end_to_end_ms;
        point
    }

    /// The three CSV tables (requests, instances, nodes).
    pub fn export_csv(&self) -> String {
        join_csv_tables(&[self.csv_tables(None)])
    }

    /// The requests, instances and nodes tables, each with its header row,
    /// optionally prefixing every row with an `arena` column.
    pub fn csv_tables(&self, arena: Option<&str>) -> [String; 3] {
        let mut requests = Table::new(
            arena,
            &[
                "request_id",
                "function_type",
                "arrival_ms",
                "enqueue_ms",
                "dispatch_ms",
                "exec_start_ms",
                "end_ms",
                "status",
                "queue_wait_ms",
                "execution_ms",
                "end_to_end_ms",
                "cost",
                "instance_id",
                "node_id",
            ],
        );
        for id in self.requests.keys() {
            let r = self.request_record(*id).expect("present");
            requests.row(&[
                r.request_id.0.to_string(),
                r.function_type,
                r.arrival_ms.to_string(),
                opt(r.enqueue_ms),
                opt(r.dispatch_ms),
                opt(r.exec_start_ms),
                opt(r.end_ms),
                r.status.as_str().to_string(),
                opt(r.queue_wait_ms),
                opt(r.execution_ms),
                opt(r.end_to_end_ms),
                opt(r.cost_units),
                opt(r.instance_id),
                opt(r.node_id),
            ]);
        }

        let mut instances = Table::new(
            arena,
            &[
                "instance_id",
                "function_type",
                "node_id",
                "state",
                "created_ms",
                "ready_ms",
                "ended_ms",
                "requests_served",
                "cpu",
                "mem_mb",
            ],
        );
        for i in self.instances.values() {
            instances.row(&[
                i.id.to_string(),
                i.function_type.clone(),
                i.node_id.to_string(),
                format!("{:?}", i.state),
                i.created_at.millis().to_string(),
                i.cold_ready_at.millis().to_string(),
                opt(i.ended_at.map(SimTime::millis)),
                i.requests_served.to_string(),
                format_vcpu(i.demand.cpu_millis),
                i.demand.mem_mb.to_string(),
            ]);
        }

        let mut nodes = Table::new(
            arena,
            &[
                "node_id",
                "state",
                "cpu_capacity",
                "mem_capacity_mb",
                "cpu_used",
                "mem_used_mb",
                "provisioned_ms",
                "active_ms",
                "ended_ms",
                "instances_hosted",
            ],
        );
        for n in self.nodes.values() {
            nodes.row(&[
                n.id.to_string(),
                format!("{:?}", n.state),
                format_vcpu(n.capacity.cpu_millis),
                n.capacity.mem_mb.to_string(),
                format_vcpu(n.used.cpu_millis),
                n.used.mem_mb.to_string(),
                n.provisioned_at.millis().to_string(),
                opt(n.active_at.map(SimTime::millis)),
                opt(n.ended_at.map(SimTime::millis)),
                n.instances_hosted_total.to_string(),
            ]);
        }

        [requests.finish(), instances.finish(), nodes.finish()]
    }
}

/// Concatenates table sets into one document: each table appears once, under
/// a `# name` line, with the header of the first set and the rows of all.
pub fn join_csv_tables(sets: &[[String; 3]]) -> String {
    let mut out = String::new();
    for (i, name) in ["requests", "instances", "nodes"].into_iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str("# ");
        out.push_str(name);
        out.push('\n');
        for (j, set) in sets.iter().enumerate() {
            let table = &set[i];
            let body = if j == 0 {
                table.as_str()
            } else {
                table.split_once('\n').map_or("", |(_, rest)| rest)
            };
            out.push_str(body);
        }
    }
    out
}

/// Fraction `used / capacity`; 0 when there is no capacity.
pub fn utilisation(used: u64, capacity: u64) -> f64 {
    if capacity == 0 {
        0.0
    } else {
        used as f64 / capacity as f64
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

struct Table {
    arena: Option<String>,
    writer: csv::Writer<Vec<u8>>,
}

impl Table {
    fn new(arena: Option<&str>, header: &[&str]) -> Self {
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let mut cols: Vec<&str> = Vec::with_capacity(header.len() + 1);
        if arena.is_some() {
            cols.push("arena");
        }
        cols.extend_from_slice(header);
        writer.write_record(&cols).expect("in-memory write");
        Self {
            arena: arena.map(str::to_string),
            writer,
        }
    }

    fn row(&mut self, fields: &[String]) {
        let mut rec: Vec<&str> = Vec::with_capacity(fields.len() + 1);
        if let Some(a) = &self.arena {
            rec.push(a);
        }
        rec.extend(fields.iter().map(String::as_str));
        self.writer.write_record(&rec).expect("in-memory write");
    }

    fn finish(self) -> String {
        let bytes = self.writer.into_inner().expect("in-memory flush");
        String::from_utf8(bytes).expect("csv output is utf-8")
    }
}
