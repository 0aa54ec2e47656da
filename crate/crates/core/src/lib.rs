//! Deterministic discrete-event simulator of a serverless function platform.
//!
//! A [`Simulation`] is one arena: a virtual clock, a request dispatcher, the
//! function instances and compute nodes, and the metrics they produce.
//! [`Battleground`] runs two arenas on a shared workload and [`Controller`]
//! is the command surface used by the HTTP service and the CLI.

pub mod battleground;
pub mod config;
pub mod control;
pub mod dispatch;
pub mod faults;
pub mod ids;
pub mod kernel;
pub mod lifecycle;
pub mod metrics;
pub mod placement;
pub mod request;
pub mod scenarios;
pub mod sim;
pub mod workload;

pub use battleground::{Arena, Battleground, ComparisonReport};
pub use config::{Resources, ScriptedFailure, SimConfig};
pub use control::{Ack, ControlCommand, ControlError, Controller};
pub use dispatch::{RoutingDecision, RoutingKind, RoutingPolicy};
pub use ids::{InstanceId, NodeId, RequestId};
pub use kernel::{EventKind, LogRecord, SimTime, Subject};
pub use lifecycle::InstanceState;
pub use metrics::{cost, Cost, CumulativeStats, LiveSnapshot, MetricsReport};
pub use placement::{NodeState, PlacementKind};
pub use request::{Request, RequestStatus};
pub use scenarios::{load_scenario, Scenario};
pub use sim::{SimCommand, Simulation, StreamItem};
pub use workload::{WorkloadMode, WorkloadSpec};
