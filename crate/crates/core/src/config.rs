//! Arena configuration.
//!
//! `SimConfig` is the single bag of tunables for one arena. It is read from and
//! written to JSON with the same field names, and partial JSON documents can be
//! merged into a running config (see [`SimConfig::merged`]).

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::dispatch::RoutingKind;
use crate::ids::NodeId;
use crate::placement::PlacementKind;
use crate::workload::WorkloadSpec;

/// A CPU/memory pair. CPU is held in millicores so capacity arithmetic stays
/// exact; on the wire it is written as fractional vCPUs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Resources {
    pub cpu_millis: u64,
    pub mem_mb: u64,
}

impl Resources {
    pub const ZERO: Resources = Resources {
        cpu_millis: 0,
        mem_mb: 0,
    };

    pub fn new(cpu_millis: u64, mem_mb: u64) -> Self {
        Self { cpu_millis, mem_mb }
    }

    /// Builds from whole vCPUs.
    pub fn vcpu(cpu: u64, mem_mb: u64) -> Self {
        Self::new(cpu * 1000, mem_mb)
    }

    pub fn fits_within(&self, other: &Resources) -> bool {
        self.cpu_millis <= other.cpu_millis && self.mem_mb <= other.mem_mb
    }

    pub fn checked_sub(&self, other: &Resources) -> Option<Resources> {
        Some(Resources {
            cpu_millis: self.cpu_millis.checked_sub(other.cpu_millis)?,
            mem_mb: self.mem_mb.checked_sub(other.mem_mb)?,
        })
    }

    pub fn saturating_add(&self, other: &Resources) -> Resources {
        Resources {
            cpu_millis: self.cpu_millis.saturating_add(other.cpu_millis),
            mem_mb: self.mem_mb.saturating_add(other.mem_mb),
        }
    }
}

/// Renders millicores as a plain decimal vCPU count (`1500` → `1.5`).
pub fn format_vcpu(cpu_millis: u64) -> String {
    let whole = cpu_millis / 1000;
    let frac = cpu_millis % 1000;
    if frac == 0 {
        whole.to_string()
    } else {
        format!("{whole}.{frac:03}")
            .trim_end_matches('0')
            .to_string()
    }
}

pub(crate) fn vcpu_to_millis(cpu: f64) -> Option<u64> {
    if cpu.is_finite() && cpu >= 0.0 {
        Some((cpu * 1000.0).round() as u64)
    } else {
        None
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResourcesWire {
    cpu: f64,
    mem_mb: u64,
}

impl Serialize for Resources {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        ResourcesWire {
            cpu: self.cpu_millis as f64 / 1000.0,
            mem_mb: self.mem_mb,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Resources {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let wire = ResourcesWire::deserialize(deserializer)?;
        let cpu_millis = vcpu_to_millis(wire.cpu)
            .ok_or_else(|| serde::de::Error::custom("cpu must be a non-negative number"))?;
        Ok(Resources {
            cpu_millis,
            mem_mb: wire.mem_mb,
        })
    }
}

/// A node failure injected at a fixed simulated time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedFailure {
    pub node: NodeId,
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub routing_strategy: RoutingKind,
    pub placement_strategy: PlacementKind,
    pub cold_start_delay_ms: u64,
    /// Base execution time per function type. The keys are the known types.
    pub exec_base_ms: BTreeMap<String, u64>,
    pub exec_jitter: f64,
    pub concurrency_limit: u32,
    pub instance_demand: Resources,
    pub node_capacity: Resources,
    /// Per function type.
    pub max_instances: u32,
    pub max_nodes: u32,
    pub node_startup_delay_ms: u64,
    pub inactivity_timeout_ms: u64,
    pub request_ttl_ms: u64,
    pub max_execution_timeout_ms: u64,
    pub timeout_kills_instance: bool,
    pub scale_up_on_busy: bool,
    pub sample_interval_ms: u64,
    pub workload: WorkloadSpec,
    pub node_failures: Vec<ScriptedFailure>,
    pub seed: u64,
    /// Simulated milliseconds per wall-clock second; 0 runs as fast as possible.
    pub pace: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            routing_strategy: RoutingKind::WarmPriority,
            placement_strategy: PlacementKind::FirstFit,
            cold_start_delay_ms: 1000,
            exec_base_ms: BTreeMap::from([("f".to_string(), 500)]),
            exec_jitter: 0.0,
            concurrency_limit: 1,
            instance_demand: Resources::new(500, 128),
            node_capacity: Resources::vcpu(2, 1024),
            max_instances: 10,
            max_nodes: 4,
            node_startup_delay_ms: 0,
            inactivity_timeout_ms: 10_000,
            request_ttl_ms: 10_000,
            max_execution_timeout_ms: 30_000,
            timeout_kills_instance: true,
            scale_up_on_busy: true,
            sample_interval_ms: 250,
            workload: WorkloadSpec::default(),
            node_failures: Vec::new(),
            seed: 1,
            pace: 1000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid config: {0}")]
pub struct ConfigError(pub String);

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: &str| Err(ConfigError(msg.to_string()));
        if self.exec_base_ms.is_empty() {
            return bad("exec_base_ms must define at least one function type");
        }
        if !(0.0..1.0).contains(&self.exec_jitter) {
            return bad("exec_jitter must be in [0, 1)");
        }
        if self.concurrency_limit < 1 {
            return bad("concurrency_limit must be >= 1");
        }
        if self.max_instances < 1 {
            return bad("max_instances must be >= 1");
        }
        if self.max_nodes < 1 {
            return bad("max_nodes must be >= 1");
        }
        if self.instance_demand.cpu_millis == 0 || self.instance_demand.mem_mb == 0 {
            return bad("instance_demand must be positive in both dimensions");
        }
        if !self.instance_demand.fits_within(&self.node_capacity) {
            return bad("instance_demand exceeds node_capacity; nothing could be placed");
        }
        if self.request_ttl_ms == 0 {
            return bad("request_ttl_ms must be > 0");
        }
        if self.max_execution_timeout_ms == 0 {
            return bad("max_execution_timeout_ms must be > 0");
        }
        if self.sample_interval_ms == 0 {
            return bad("sample_interval_ms must be > 0");
        }
        if !(self.pace.is_finite() && self.pace >= 0.0) {
            return bad("pace must be >= 0");
        }
        self.workload
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        if let Some(ty) = self
            .workload
            .function_types()
            .find(|ty| !self.exec_base_ms.contains_key(*ty))
        {
            return Err(ConfigError(format!(
                "workload uses function type `{ty}` missing from exec_base_ms"
            )));
        }
        Ok(())
    }

    /// Returns a copy with the JSON object `patch` deep-merged in, validated.
    pub fn merged(&self, patch: &Value) -> Result<SimConfig, ConfigError> {
        if !patch.is_object() {
            return Err(ConfigError("config patch must be a JSON object".into()));
        }
        let mut base = serde_json::to_value(self).expect("config serialises");
        merge_json(&mut base, patch);
        let next: SimConfig =
            serde_json::from_value(base).map_err(|e| ConfigError(e.to_string()))?;
        next.validate()?;
        Ok(next)
    }

    pub fn exec_base_for(&self, function_type: &str) -> Option<u64> {
        self.exec_base_ms.get(function_type).copied()
    }

    /// Period of the idle sweep: a quarter of the inactivity timeout, at
    /// least 100 ms.
    pub fn sweep_period_ms(&self) -> u64 {
        (self.inactivity_timeout_ms / 4).max(100)
    }

    pub fn from_json(text: &str) -> Result<SimConfig, ConfigError> {
        let cfg: SimConfig = serde_json::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge_json(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (key, value) in p {
                match b.get_mut(key) {
                    Some(slot) if slot.is_object() && value.is_object() => merge_json(slot, value),
                    _ => {
                        b.insert(key.clone(), value.clone());
                    }
                }
            }
        }
        (slot, value) => *slot = value.clone(),
    }
}
