//! Function-instance lifecycle: provisioning, cold start, concurrent
//! execution and idle reaping.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::config::Resources;
use crate::ids::{InstanceId, NodeId, RequestId};
use crate::kernel::{EventId, EventKind, SimTime, Subject};
use crate::placement::{ComputeNode, NodeState};
use crate::request::RequestStatus;
use crate::sim::Simulation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InstanceState {
    ColdStarting,
    Busy,
    Warm,
    Terminated,
    Failed,
}

impl InstanceState {
    pub fn is_live(self) -> bool {
        matches!(
            self,
            InstanceState::ColdStarting | InstanceState::Busy | InstanceState::Warm
        )
    }

    /// Display colour used by the visualiser.
    pub fn colour(self) -> &'static str {
        match self {
            InstanceState::ColdStarting => "orange",
            InstanceState::Busy => "blue",
            InstanceState::Warm => "green",
            InstanceState::Terminated => "grey",
            InstanceState::Failed => "red",
        }
    }

    pub fn can_become(self, next: InstanceState) -> bool {
        use InstanceState::*;
        matches!(
            (self, next),
            (ColdStarting, Warm)
                | (ColdStarting, Failed)
                | (Warm, Busy)
                | (Warm, Terminated)
                | (Warm, Failed)
                | (Busy, Warm)
                | (Busy, Failed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LifecycleError {
    #[error("instance limit of {0} reached")]
    InstanceLimitReached(u32),
    #[error("no node can host the instance and the node limit is reached")]
    NoCapacity,
    #[error("{instance}: illegal transition {from:?} -> {to:?}")]
    InvalidTransition {
        instance: InstanceId,
        from: InstanceState,
        to: InstanceState,
    },
    #[error("{0} has no free concurrency slot")]
    ConcurrencyExceeded(InstanceId),
    #[error("unknown instance {0}")]
    UnknownInstance(InstanceId),
    #[error("{request} is not running on {instance}")]
    UnknownRequest {
        request: RequestId,
        instance: InstanceId,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionInstance {
    pub id: InstanceId,
    pub function_type: String,
    pub node_id: NodeId,
    pub state: InstanceState,
    pub in_flight: BTreeSet<RequestId>,
    pub concurrency_limit: u32,
    pub demand: Resources,
    pub created_at: SimTime,
    pub cold_ready_at: SimTime,
    pub last_idle_since: Option<SimTime>,
    pub ended_at: Option<SimTime>,
    pub requests_served: u64,
    pub(crate) cold_event: Option<EventId>,
}

impl FunctionInstance {
    pub fn has_free_slot(&self) -> bool {
        (self.in_flight.len() as u32) < self.concurrency_limit
    }

    pub fn transition(&mut self, next: InstanceState) -> Result<(), LifecycleError> {
        if !self.state.can_become(next) {
            return Err(LifecycleError::InvalidTransition {
                instance: self.id,
                from: self.state,
                to: next,
            });
        }
        self.state = next;
        Ok(())
    }
}

impl Simulation {
    fn live_instances_of<'a>(
        &'a self,
        function_type: &'a str,
    ) -> impl Iterator<Item = &'a FunctionInstance> + 'a {
        self.instances
            .values()
            .filter(move |i| i.state.is_live() && i.function_type == function_type)
    }

    /// Whether another instance of `function_type` should be provisioned:
    /// limits allow it and queued demand exceeds the free slots plus the
    /// slots already on their way through cold starts.
    pub fn scale_up_wanted(&self, function_type: &str) -> bool {
        let live = self.live_instances_of(function_type).count() as u32;
        if live >= self.config.max_instances {
            return false;
        }
        let queued = self.queued_count(function_type);
        if queued == 0 {
            return false;
        }
        if !self.config.scale_up_on_busy {
            return live == 0;
        }
        let coming: usize = self
            .live_instances_of(function_type)
            .map(|i| match i.state {
                InstanceState::ColdStarting => i.concurrency_limit as usize,
                _ => (i.concurrency_limit as usize).saturating_sub(i.in_flight.len()),
            })
            .sum();
        queued > coming
    }

    /// Provisions instances of `function_type` while more are wanted.
    pub(crate) fn scale_up(&mut self, function_type: &str) {
        while self.scale_up_wanted(function_type) {
            let Ok(instance) = self.provision_instance(function_type) else {
                break;
            };
            // The oldest plain-queued request of this type now waits on it.
            let waiter = self.queue.iter().map(|e| e.request).find(|r| {
                let req = &self.requests[r];
                req.function_type == function_type && req.status == RequestStatus::InQueue
            });
            if let Some(r) = waiter {
                let req = self.requests.get_mut(&r).expect("queued request exists");
                req.status = RequestStatus::ColdStartWait;
                req.triggered_instance = Some(instance);
                self.emit_request_delta(r);
            }
        }
    }

    /// Places a new instance (provisioning a node if nothing fits) and starts
    /// its cold start.
    pub fn provision_instance(
        &mut self,
        function_type: &str,
    ) -> Result<InstanceId, LifecycleError> {
        let live = self.live_instances_of(function_type).count() as u32;
        if live >= self.config.max_instances {
            return Err(LifecycleError::InstanceLimitReached(
                self.config.max_instances,
            ));
        }
        let demand = self.config.instance_demand;
        let candidates: Vec<&ComputeNode> =
            self.nodes.values().filter(|n| n.state.is_live()).collect();
        let chosen = self
            .placement
            .select(&candidates, &demand, function_type)
            .filter(|id| {
                candidates
                    .iter()
                    .any(|n| n.id == *id && n.can_hold(&demand))
            });
        let node_id = match chosen {
            Some(id) => id,
            None => self
                .provision_node()
                .map_err(|_| LifecycleError::NoCapacity)?,
        };

        let now = self.now();
        let id = self.ids.next_instance();
        let node = self.nodes.get_mut(&node_id).expect("chosen node exists");
        node.host(id, function_type, &demand);
        let cold_ready_at = now.max(node.ready_at) + self.config.cold_start_delay_ms;
        let cold_event = self
            .kernel
            .schedule(
                cold_ready_at,
                EventKind::ColdStartComplete,
                Subject::Instance(id),
            )
            .expect("cold start completes in the future");
        self.instances.insert(
            id,
            FunctionInstance {
                id,
                function_type: function_type.to_string(),
                node_id,
                state: InstanceState::ColdStarting,
                in_flight: BTreeSet::new(),
                concurrency_limit: self.config.concurrency_limit,
                demand,
                created_at: now,
                cold_ready_at,
                last_idle_since: None,
                ended_at: None,
                requests_served: 0,
                cold_event: Some(cold_event),
            },
        );
        self.metrics.record_cold_start();
        self.emit_instance_delta(id);
        self.emit_node_delta(node_id);
        self.ensure_sweep();
        Ok(id)
    }

    /// ColdStarting → Warm. The caller drains the queue afterwards.
    pub fn complete_cold_start(&mut self, instance: InstanceId) -> Result<(), LifecycleError> {
        let now = self.now();
        let inst = self
            .instances
            .get_mut(&instance)
            .ok_or(LifecycleError::UnknownInstance(instance))?;
        inst.transition(InstanceState::Warm)?;
        inst.cold_event = None;
        inst.last_idle_since = Some(now);
        self.emit_instance_delta(instance);
        Ok(())
    }

    /// Starts executing `request` on `instance`. Returns the completion time.
    pub fn assign(
        &mut self,
        instance: InstanceId,
        request: RequestId,
    ) -> Result<SimTime, LifecycleError> {
        let now = self.now();
        let timeout_ms = self.config.max_execution_timeout_ms;
        let inst = self
            .instances
            .get(&instance)
            .ok_or(LifecycleError::UnknownInstance(instance))?;
        if !matches!(inst.state, InstanceState::Warm | InstanceState::Busy) {
            return Err(LifecycleError::InvalidTransition {
                instance,
                from: inst.state,
                to: InstanceState::Busy,
            });
        }
        if !inst.has_free_slot() {
            return Err(LifecycleError::ConcurrencyExceeded(instance));
        }
        let function_type = inst.function_type.clone();
        let node_id = inst.node_id;
        let duration = self.sample_execution_ms(&function_type);

        let inst = self.instances.get_mut(&instance).expect("checked above");
        if inst.state == InstanceState::Warm {
            inst.transition(InstanceState::Busy)?;
        }
        inst.in_flight.insert(request);
        inst.last_idle_since = None;

        let done_at = now + duration;
        let completion = self
            .kernel
            .schedule(
                done_at,
                EventKind::ExecutionComplete,
                Subject::Request(request),
            )
            .expect("future event");
        let timeout = self
            .kernel
            .schedule(
                now + timeout_ms,
                EventKind::ExecutionTimeout,
                Subject::Request(request),
            )
            .expect("future event");
        let req = self
            .requests
            .get_mut(&request)
            .expect("assigned request exists");
        req.exec_start_time = Some(now);
        req.status = RequestStatus::Executing;
        req.assigned_instance = Some(instance);
        req.node_id = Some(node_id);
        req.timers.completion = Some(completion);
        req.timers.timeout = Some(timeout);
        self.emit_request_delta(request);
        self.emit_instance_delta(instance);
        Ok(done_at)
    }

    /// Finishes `request` successfully. The caller drains the queue afterwards.
    pub fn complete(&mut self, request: RequestId) -> Result<(), LifecycleError> {
        let now = self.now();
        let instance = self.requests[&request]
            .assigned_instance
            .expect("completing request was assigned");
        let inst = self
            .instances
            .get_mut(&instance)
            .ok_or(LifecycleError::UnknownInstance(instance))?;
        if !inst.in_flight.remove(&request) {
            return Err(LifecycleError::UnknownRequest { request, instance });
        }
        inst.requests_served += 1;
        if inst.in_flight.is_empty() {
            inst.transition(InstanceState::Warm)?;
            inst.last_idle_since = Some(now);
        }
        let memory = inst.demand.mem_mb;
        let req = self.requests.get_mut(&request).expect("exists");
        if let Some(t) = req.timers.timeout.take() {
            self.kernel.cancel(t);
        }
        req.timers.completion = None;
        req.finish(RequestStatus::Succeeded, now);
        self.metrics.record_terminal(req, memory);
        self.emit_request_delta(request);
        self.emit_instance_delta(instance);
        Ok(())
    }

    /// Terminates instances idle for at least the inactivity timeout (oldest
    /// idle first), then deprovisions empty nodes idle that long.
    pub fn reap_idle(&mut self) -> (Vec<InstanceId>, Vec<NodeId>) {
        let now = self.now();
        let timeout = self.config.inactivity_timeout_ms;
        let mut idle: Vec<(SimTime, InstanceId)> = self
            .instances
            .values()
            .filter(|i| i.state == InstanceState::Warm)
            .filter_map(|i| i.last_idle_since.map(|t| (t, i.id)))
            .filter(|(t, _)| now.since(*t) >= timeout)
            .collect();
        idle.sort();
        let mut terminated = Vec::with_capacity(idle.len());
        for (_, id) in idle {
            let inst = self.instances.get_mut(&id).expect("exists");
            debug_assert!(inst.in_flight.is_empty());
            inst.transition(InstanceState::Terminated)
                .expect("warm instances may terminate");
            inst.ended_at = Some(now);
            let (node_id, ty, demand) = (inst.node_id, inst.function_type.clone(), inst.demand);
            self.nodes
                .get_mut(&node_id)
                .expect("host exists")
                .evict(id, &ty, &demand, now)
                .expect("host accounted for this instance");
            terminated.push(id);
            self.emit_instance_delta(id);
            self.emit_node_delta(node_id);
        }

        let mut empty: Vec<(SimTime, NodeId)> = self
            .nodes
            .values()
            .filter(|n| n.state == NodeState::Active && n.hosted.is_empty())
            .filter(|n| now.since(n.last_active_at) >= timeout)
            .map(|n| (n.last_active_at, n.id))
            .collect();
        empty.sort();
        let mut released = Vec::with_capacity(empty.len());
        for (_, id) in empty {
            let node = self.nodes.get_mut(&id).expect("exists");
            node.state = NodeState::Deprovisioned;
            node.ended_at = Some(now);
            released.push(id);
            self.emit_node_delta(id);
        }
        (terminated, released)
    }

    /// Arms the idle sweep on the next multiple of the sweep period, unless
    /// one is pending already.
    pub(crate) fn ensure_sweep(&mut self) {
        if self.sweep_event.is_some_and(|e| self.kernel.is_pending(e)) {
            return;
        }
        let period = self.config.sweep_period_ms();
        let next = SimTime((self.now().millis() / period + 1) * period);
        self.sweep_event = Some(
            self.kernel
                .schedule(next, EventKind::InactivityCheck, Subject::None)
                .expect("future event"),
        );
    }

    pub(crate) fn on_inactivity_check(&mut self) {
        self.sweep_event = None;
        self.reap_idle();
        let anything_live = self.instances.values().any(|i| i.state.is_live())
            || self.nodes.values().any(|n| n.state.is_live());
        if anything_live {
            self.ensure_sweep();
        }
    }

    fn sample_execution_ms(&mut self, function_type: &str) -> u64 {
        let base = self
            .config
            .exec_base_for(function_type)
            .expect("function types are validated on entry") as f64;
        let jitter = self.config.exec_jitter;
        if jitter == 0.0 {
            return base as u64;
        }
        self.rng
            .uniform(base * (1.0 - jitter), base * (1.0 + jitter))
            .round() as u64
    }
}
