use serde::{Deserialize, Serialize};

use crate::ids::{InstanceId, NodeId, RequestId};
use crate::kernel::{EventId, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RequestStatus {
    InQueue,
    Dispatched,
    /// Queued while an instance provisioned on its behalf is cold-starting.
    ColdStartWait,
    Executing,
    Succeeded,
    FailedTtl,
    FailedExecTimeout,
    FailedNodeDown,
}

impl RequestStatus {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            RequestStatus::Succeeded
                | RequestStatus::FailedTtl
                | RequestStatus::FailedExecTimeout
                | RequestStatus::FailedNodeDown
        )
    }

    pub fn is_failure(self) -> bool {
        self.is_terminal() && self != RequestStatus::Succeeded
    }

    pub fn is_queued(self) -> bool {
        matches!(self, RequestStatus::InQueue | RequestStatus::ColdStartWait)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RequestStatus::InQueue => "InQueue",
            RequestStatus::Dispatched => "Dispatched",
            RequestStatus::ColdStartWait => "ColdStartWait",
            RequestStatus::Executing => "Executing",
            RequestStatus::Succeeded => "Succeeded",
            RequestStatus::FailedTtl => "FailedTtl",
            RequestStatus::FailedExecTimeout => "FailedExecTimeout",
            RequestStatus::FailedNodeDown => "FailedNodeDown",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        use RequestStatus::*;
        [
            InQueue,
            Dispatched,
            ColdStartWait,
            Executing,
            Succeeded,
            FailedTtl,
            FailedExecTimeout,
            FailedNodeDown,
        ]
        .into_iter()
        .find(|st| st.as_str() == s)
    }
}

/// Pending kernel events owned by a request, kept so they can be tombstoned.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub(crate) struct RequestTimers {
    pub ttl: Option<EventId>,
    pub completion: Option<EventId>,
    pub timeout: Option<EventId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: RequestId,
    pub function_type: String,
    pub arrival_time: SimTime,
    pub enqueue_time: Option<SimTime>,
    pub dispatch_time: Option<SimTime>,
    pub exec_start_time: Option<SimTime>,
    pub end_time: Option<SimTime>,
    pub status: RequestStatus,
    pub assigned_instance: Option<InstanceId>,
    pub node_id: Option<NodeId>,
    /// Instance whose provisioning this request triggered, if any.
    pub triggered_instance: Option<InstanceId>,
    /// Set when the serving instance was created while this request waited
    /// (the request was served cold): the time that instance became ready.
    pub cold_ready_while_waiting: Option<SimTime>,
    pub(crate) timers: RequestTimers,
}

impl Request {
    pub fn new(id: RequestId, function_type: impl Into<String>, arrival_time: SimTime) -> Self {
        Self {
            id,
            function_type: function_type.into(),
            arrival_time,
            enqueue_time: None,
            dispatch_time: None,
            exec_start_time: None,
            end_time: None,
            status: RequestStatus::InQueue,
            assigned_instance: None,
            node_id: None,
            triggered_instance: None,
            cold_ready_while_waiting: None,
            timers: RequestTimers::default(),
        }
    }

    /// `dispatch − enqueue`, once dispatched.
    pub fn queue_wait_ms(&self) -> Option<u64> {
        Some(self.dispatch_time?.since(self.enqueue_time?))
    }

    /// `end − exec_start`, once execution has ended (successfully or not).
    pub fn execution_ms(&self) -> Option<u64> {
        Some(self.end_time?.since(self.exec_start_time?))
    }

    pub fn end_to_end_ms(&self) -> Option<u64> {
        if !self.status.is_terminal() {
            return None;
        }
        Some(self.end_time?.since(self.arrival_time))
    }

    /// Part of the queue wait spent waiting for the serving instance to
    /// finish its cold start. Always `<= queue_wait_ms`.
    pub fn cold_start_wait_ms(&self) -> u64 {
        match (self.enqueue_time, self.cold_ready_while_waiting) {
            (Some(enq), Some(ready)) => ready.since(enq),
            _ => 0,
        }
    }

    /// Moves to a terminal status. Terminal statuses are absorbing, so a
    /// second call is ignored and reported as `false`.
    pub(crate) fn finish(&mut self, status: RequestStatus, now: SimTime) -> bool {
        debug_assert!(status.is_terminal());
        if self.status.is_terminal() {
            return false;
        }
        self.status = status;
        self.end_time = Some(now);
        true
    }
}
