//! The request dispatcher: FIFO queue and routing strategies.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ids::{InstanceId, RequestId};
use crate::kernel::{EventKind, SimTime, Subject};
use crate::lifecycle::InstanceState;
use crate::request::RequestStatus;
use crate::sim::Simulation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingKind {
    #[default]
    WarmPriority,
    RoundRobin,
    LeastConnections,
}

impl RoutingKind {
    pub const ALL: [RoutingKind; 3] = [
        RoutingKind::WarmPriority,
        RoutingKind::RoundRobin,
        RoutingKind::LeastConnections,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RoutingKind::WarmPriority => "warm_priority",
            RoutingKind::RoundRobin => "round_robin",
            RoutingKind::LeastConnections => "least_connections",
        }
    }

    pub fn policy(self) -> Box<dyn RoutingPolicy> {
        match self {
            RoutingKind::WarmPriority => Box::new(WarmPriority),
            RoutingKind::RoundRobin => Box::new(RoundRobin::default()),
            RoutingKind::LeastConnections => Box::new(LeastConnections),
        }
    }
}

impl fmt::Display for RoutingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoutingKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown routing strategy `{s}`"))
    }
}

/// What the router sees of one instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceView {
    pub id: InstanceId,
    pub state: InstanceState,
    pub in_flight: u32,
    pub concurrency_limit: u32,
}

impl InstanceView {
    pub fn has_free_slot(&self) -> bool {
        self.in_flight < self.concurrency_limit
    }

    /// Initialised and below its concurrency limit.
    pub fn is_available(&self) -> bool {
        matches!(self.state, InstanceState::Warm | InstanceState::Busy) && self.has_free_slot()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoutingDecision {
    Assign(InstanceId),
    Enqueue,
    EnqueueAndScaleUp,
}

/// Extension point for routing logic. Implementations choose among the live
/// instances of one function type (id order, cold-starting ones included);
/// returning an instance that is not available is treated as "none".
pub trait RoutingPolicy: Send + fmt::Debug {
    fn name(&self) -> &str;
    fn pick(&mut self, instances: &[InstanceView]) -> Option<InstanceId>;
}

/// Reuse an idle warm instance first (lowest id), then a busy one that still
/// has a free slot.
#[derive(Debug, Clone, Copy, Default)]
pub struct WarmPriority;

impl RoutingPolicy for WarmPriority {
    fn name(&self) -> &str {
        RoutingKind::WarmPriority.as_str()
    }

    fn pick(&mut self, instances: &[InstanceView]) -> Option<InstanceId> {
        let available = || instances.iter().filter(|i| i.is_available());
        available()
            .filter(|i| i.state == InstanceState::Warm)
            .map(|i| i.id)
            .min()
            .or_else(|| available().map(|i| i.id).min())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RoundRobin {
    pub cursor: usize,
}

impl RoutingPolicy for RoundRobin {
    fn name(&self) -> &str {
        RoutingKind::RoundRobin.as_str()
    }

    fn pick(&mut self, instances: &[InstanceView]) -> Option<InstanceId> {
        let n = instances.len();
        if self.cursor >= n {
            self.cursor = 0;
        }
        if n == 0 {
            return None;
        }
        let chosen = (0..n)
            .map(|step| (self.cursor + step) % n)
            .find(|&idx| instances[idx].is_available())?;
        self.cursor = (chosen + 1) % n;
        Some(instances[chosen].id)
    }
}

/// Fewest in-flight requests; ties to the lowest id.
#[derive(Debug, Clone, Copy, Default)]
pub struct LeastConnections;

impl RoutingPolicy for LeastConnections {
    fn name(&self) -> &str {
        RoutingKind::LeastConnections.as_str()
    }

    fn pick(&mut self, instances: &[InstanceView]) -> Option<InstanceId> {
        instances
            .iter()
            .filter(|i| i.is_available())
            .min_by_key(|i| (i.in_flight, i.id))
            .map(|i| i.id)
    }
}

/// Routes one request. `can_scale` says whether a new instance of the
/// request's type may be provisioned right now.
pub fn route(
    instances: &[InstanceView],
    policy: &mut dyn RoutingPolicy,
    can_scale: bool,
) -> RoutingDecision {
    let picked = policy
        .pick(instances)
        .filter(|id| instances.iter().any(|i| i.id == *id && i.is_available()));
    match picked {
        Some(id) => RoutingDecision::Assign(id),
        None if can_scale => RoutingDecision::EnqueueAndScaleUp,
        None => RoutingDecision::Enqueue,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueEntry {
    pub request: RequestId,
    pub enqueue_time: SimTime,
    pub ttl_deadline: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DispatchError {
    #[error("{0} is already queued or finished")]
    DuplicateEnqueue(RequestId),
    #[error("unknown request {0}")]
    UnknownRequest(RequestId),
}

/// Strict FIFO of waiting requests.
#[derive(Debug, Clone, Default)]
pub struct DispatchQueue {
    entries: VecDeque<QueueEntry>,
    members: HashSet<RequestId>,
}

impl DispatchQueue {
    pub fn push(&mut self, entry: QueueEntry) -> Result<usize, DispatchError> {
        if !self.members.insert(entry.request) {
            return Err(DispatchError::DuplicateEnqueue(entry.request));
        }
        self.entries.push_back(entry);
        Ok(self.entries.len() - 1)
    }

    pub fn front(&self) -> Option<&QueueEntry> {
        self.entries.front()
    }

    pub fn pop_front(&mut self) -> Option<QueueEntry> {
        let entry = self.entries.pop_front()?;
        self.members.remove(&entry.request);
        Some(entry)
    }

    pub fn remove(&mut self, request: RequestId) -> Option<QueueEntry> {
        if !self.members.remove(&request) {
            return None;
        }
        let pos = self.entries.iter().position(|e| e.request == request)?;
        self.entries.remove(pos)
    }

    pub fn contains(&self, request: RequestId) -> bool {
        self.members.contains(&request)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.members.clear();
    }
}

impl Simulation {
    /// Appends a request to the queue and arms its TTL. Returns the queue
    /// position.
    pub fn enqueue(&mut self, request: RequestId, ttl_ms: u64) -> Result<usize, DispatchError> {
        let now = self.now();
        let req = self
            .requests
            .get(&request)
            .ok_or(DispatchError::UnknownRequest(request))?;
        if req.status.is_terminal() || req.enqueue_time.is_some() || self.queue.contains(request) {
            return Err(DispatchError::DuplicateEnqueue(request));
        }
        let deadline = now + ttl_ms;
        let pos = self.queue.push(QueueEntry {
            request,
            enqueue_time: now,
            ttl_deadline: deadline,
        })?;
        let ttl = self
            .kernel
            .schedule(deadline, EventKind::TtlExpiry, Subject::Request(request))
            .expect("deadline is not in the past");
        let req = self.requests.get_mut(&request).expect("checked above");
        req.enqueue_time = Some(now);
        req.status = RequestStatus::InQueue;
        req.timers.ttl = Some(ttl);
        self.emit_request_delta(request);
        Ok(pos)
    }

    /// Routes head-of-queue requests until the head cannot be placed.
    /// Returns the assignments made, in order.
    pub fn drain(&mut self) -> Vec<(RequestId, InstanceId)> {
        let mut assigned = Vec::new();
        while let Some(head) = self.queue.front().copied() {
            let function_type = self.requests[&head.request].function_type.clone();
            let views = self.instance_views(&function_type);
            let can_scale = self.scale_up_wanted(&function_type);
            match route(&views, self.routing.as_mut(), can_scale) {
                RoutingDecision::Assign(instance) => {
                    self.queue.pop_front();
                    self.dispatch(head.request, instance);
                    assigned.push((head.request, instance));
                }
                RoutingDecision::EnqueueAndScaleUp => {
                    self.scale_up(&function_type);
                    break;
                }
                RoutingDecision::Enqueue => break,
            }
        }
        // Requests of other types stuck behind the head still drive scale-up.
        let waiting: Vec<String> = self.queued_types();
        for ty in waiting {
            if self.scale_up_wanted(&ty) {
                self.scale_up(&ty);
            }
        }
        assigned
    }

    pub(crate) fn queued_count(&self, function_type: &str) -> usize {
        self.queue
            .iter()
            .filter(|e| self.requests[&e.request].function_type == function_type)
            .count()
    }

    fn queued_types(&self) -> Vec<String> {
        let mut seen: Vec<String> = Vec::new();
        for entry in self.queue.iter() {
            let ty = &self.requests[&entry.request].function_type;
            if !seen.iter().any(|s| s == ty) {
                seen.push(ty.clone());
            }
        }
        seen
    }

    /// Views of the live instances of one type, in id order.
    pub fn instance_views(&self, function_type: &str) -> Vec<InstanceView> {
        self.instances
            .values()
            .filter(|i| i.state.is_live() && i.function_type == function_type)
            .map(|i| InstanceView {
                id: i.id,
                state: i.state,
                in_flight: i.in_flight.len() as u32,
                concurrency_limit: i.concurrency_limit,
            })
            .collect()
    }

    /// Hands a dequeued request to an instance.
    fn dispatch(&mut self, request: RequestId, instance: InstanceId) {
        let now = self.now();
        let req = self
            .requests
            .get_mut(&request)
            .expect("queued request exists");
        if let Some(ttl) = req.timers.ttl.take() {
            self.kernel.cancel(ttl);
        }
        req.dispatch_time = Some(now);
        req.status = RequestStatus::Dispatched;
        req.assigned_instance = Some(instance);
        // Served cold: the instance was created while this request waited.
        let inst = &self.instances[&instance];
        if inst.created_at >= req.enqueue_time.unwrap_or(now) {
            req.cold_ready_while_waiting = Some(inst.cold_ready_at);
        }
        self.assign(instance, request)
            .expect("router only picks instances with a free slot");
    }
}
