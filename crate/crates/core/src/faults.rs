//! TTL expiry, execution timeouts and node failure.

use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::ids::{InstanceId, NodeId, RequestId};
use crate::kernel::{EventKind, Subject};
use crate::lifecycle::InstanceState;
use crate::placement::NodeState;
use crate::request::RequestStatus;
use crate::sim::Simulation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultConfig {
    pub request_ttl_ms: u64,
    pub max_execution_timeout_ms: u64,
    pub timeout_kills_instance: bool,
}

impl From<&SimConfig> for FaultConfig {
    fn from(c: &SimConfig) -> Self {
        Self {
            request_ttl_ms: c.request_ttl_ms,
            max_execution_timeout_ms: c.max_execution_timeout_ms,
            timeout_kills_instance: c.timeout_kills_instance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FaultError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is not active")]
    NodeNotActive(NodeId),
}

/// What a node failure took down.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FailureReport {
    pub node: Option<NodeId>,
    pub instances_failed: Vec<InstanceId>,
    pub requests_failed: Vec<RequestId>,
}

impl Simulation {
    /// TTL handler. A request no longer queued is left alone.
    pub fn expire_ttl(&mut self, request: RequestId) -> bool {
        let now = self.now();
        let Some(req) = self.requests.get_mut(&request) else {
            return false;
        };
        if !req.status.is_queued() {
            return false;
        }
        req.timers.ttl = None;
        req.finish(RequestStatus::FailedTtl, now);
        self.queue.remove(request);
        let req = &self.requests[&request];
        self.metrics.record_terminal(req, 0);
        self.emit_request_delta(request);
        true
    }

    /// Execution-timeout handler for `request`: every request in flight on
    /// the same instance fails.
    pub fn execution_timeout(&mut self, request: RequestId) -> Vec<RequestId> {
        let Some(instance) = self
            .requests
            .get(&request)
            .filter(|r| r.status == RequestStatus::Executing)
            .and_then(|r| r.assigned_instance)
        else {
            return Vec::new();
        };
        let failed = self.fail_in_flight(instance, RequestStatus::FailedExecTimeout);
        if self.config.timeout_kills_instance {
            self.fail_instance(instance);
        } else {
            let now = self.now();
            let inst = self.instances.get_mut(&instance).expect("exists");
            inst.transition(InstanceState::Warm)
                .expect("an instance with in-flight work is busy");
            inst.last_idle_since = Some(now);
            self.emit_instance_delta(instance);
        }
        failed
    }

    /// Fails an active node, its instances and their in-flight requests.
    /// Queued requests keep waiting.
    pub fn fail_node(&mut self, node: NodeId) -> Result<FailureReport, FaultError> {
        let now = self.now();
        let n = self.nodes.get(&node).ok_or(FaultError::UnknownNode(node))?;
        if n.state != NodeState::Active {
            return Err(FaultError::NodeNotActive(node));
        }
        let hosted: Vec<InstanceId> = n.hosted.iter().copied().collect();
        let mut report = FailureReport {
            node: Some(node),
            ..FailureReport::default()
        };
        for instance in hosted {
            let failed = self.fail_in_flight(instance, RequestStatus::FailedNodeDown);
            report.requests_failed.extend(failed);
            self.fail_instance(instance);
            report.instances_failed.push(instance);
        }
        let n = self.nodes.get_mut(&node).expect("checked above");
        n.state = NodeState::Failed;
        n.ended_at = Some(now);
        self.emit_node_delta(node);
        Ok(report)
    }

    fn fail_in_flight(&mut self, instance: InstanceId, status: RequestStatus) -> Vec<RequestId> {
        let now = self.now();
        let inst = self.instances.get_mut(&instance).expect("exists");
        let memory = inst.demand.mem_mb;
        let victims: Vec<RequestId> = std::mem::take(&mut inst.in_flight).into_iter().collect();
        for r in &victims {
            let req = self.requests.get_mut(r).expect("in-flight request exists");
            for ev in [req.timers.completion.take(), req.timers.timeout.take()]
                .into_iter()
                .flatten()
            {
                self.kernel.cancel(ev);
            }
            req.finish(status, now);
            self.metrics.record_terminal(req, memory);
            self.emit_request_delta(*r);
        }
        victims
    }

    /// Moves a live instance to Failed and returns its resources.
    fn fail_instance(&mut self, instance: InstanceId) {
        let now = self.now();
        let inst = self.instances.get_mut(&instance).expect("exists");
        if !inst.state.is_live() {
            return;
        }
        inst.transition(InstanceState::Failed)
            .expect("live instances may fail");
        inst.ended_at = Some(now);
        inst.last_idle_since = None;
        if let Some(ev) = inst.cold_event.take() {
            self.kernel.cancel(ev);
        }
        let (node, ty, demand) = (inst.node_id, inst.function_type.clone(), inst.demand);
        self.nodes
            .get_mut(&node)
            .expect("host exists")
            .evict(instance, &ty, &demand, now)
            .expect("host accounted for this instance");
        self.emit_instance_delta(instance);
        self.emit_node_delta(node);
    }

    /// Handler for a scripted failure; inactive targets are ignored.
    pub(crate) fn on_node_failed_event(&mut self, node: NodeId) {
        if let Ok(report) = self.fail_node(node) {
            let detail = serde_json::to_string(&report).expect("report serialises");
            self.kernel.annotate_last(detail);
        }
    }

    pub(crate) fn schedule_scripted_failures(&mut self) {
        let failures = self.config.node_failures.clone();
        for f in failures {
            let at = crate::kernel::SimTime(f.at_ms).max(self.now());
            self.kernel
                .schedule(at, EventKind::NodeFailed, Subject::Node(f.node))
                .expect("not in the past");
        }
    }
}
