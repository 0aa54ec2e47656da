//! Compute nodes and instance placement.
//!
//! `select_node` picks a host for a new instance among the nodes that can hold
//! its demand. Objectives that mix CPU and memory use capacity-normalised
//! fractions and are compared exactly (cross-multiplied integers), so ties are
//! real ties and always go to the lowest node id.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::Resources;
use crate::ids::{InstanceId, NodeId};
use crate::kernel::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementKind {
    #[default]
    FirstFit,
    BestFit,
    WorstFit,
    LoadBalanced,
    Affinity,
    AntiAffinity,
    CostOptimised,
}

impl PlacementKind {
    pub const ALL: [PlacementKind; 7] = [
        PlacementKind::FirstFit,
        PlacementKind::BestFit,
        PlacementKind::WorstFit,
        PlacementKind::LoadBalanced,
        PlacementKind::Affinity,
        PlacementKind::AntiAffinity,
        PlacementKind::CostOptimised,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PlacementKind::FirstFit => "first_fit",
            PlacementKind::BestFit => "best_fit",
            PlacementKind::WorstFit => "worst_fit",
            PlacementKind::LoadBalanced => "load_balanced",
            PlacementKind::Affinity => "affinity",
            PlacementKind::AntiAffinity => "anti_affinity",
            PlacementKind::CostOptimised => "cost_optimised",
        }
    }
}

impl fmt::Display for PlacementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlacementKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown placement strategy `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeState {
    Provisioning,
    Active,
    Failed,
    Deprovisioned,
}

impl NodeState {
    /// Provisioning or Active: counts against `max_nodes` and can take placements.
    pub fn is_live(self) -> bool {
        matches!(self, NodeState::Provisioning | NodeState::Active)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlacementError {
    #[error("node limit of {0} reached")]
    NodeLimitReached(u32),
    #[error("releasing {demand:?} from {node} would underflow its usage")]
    UnderflowViolation { node: NodeId, demand: Resources },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComputeNode {
    pub id: NodeId,
    pub capacity: Resources,
    pub used: Resources,
    pub hosted: BTreeSet<InstanceId>,
    /// Live hosted instances per function type.
    pub hosted_types: BTreeMap<String, u32>,
    pub state: NodeState,
    pub provisioned_at: SimTime,
    /// Time the node is (or will be) ready to run instances.
    pub ready_at: SimTime,
    pub active_at: Option<SimTime>,
    pub ended_at: Option<SimTime>,
    /// Last time the node hosted at least one instance (or was created).
    pub last_active_at: SimTime,
    pub instances_hosted_total: u32,
}

impl ComputeNode {
    pub fn new(id: NodeId, capacity: Resources, now: SimTime) -> Self {
        Self::starting(id, capacity, now, now)
    }

    /// A node provisioned at `now` that becomes ready at `ready_at`.
    pub fn starting(id: NodeId, capacity: Resources, now: SimTime, ready_at: SimTime) -> Self {
        Self {
            id,
            capacity,
            used: Resources::ZERO,
            hosted: BTreeSet::new(),
            hosted_types: BTreeMap::new(),
            state: NodeState::Provisioning,
            provisioned_at: now,
            ready_at,
            active_at: None,
            ended_at: None,
            last_active_at: now,
            instances_hosted_total: 0,
        }
    }

    pub fn free(&self) -> Resources {
        self.capacity
            .checked_sub(&self.used)
            .expect("node usage never exceeds capacity")
    }

    pub fn can_hold(&self, demand: &Resources) -> bool {
        demand.fits_within(&self.free())
    }

    pub fn hosts_type(&self, function_type: &str) -> bool {
        self.hosted_types.get(function_type).is_some_and(|n| *n > 0)
    }

    /// Deducts `demand` for a new instance.
    pub(crate) fn host(&mut self, instance: InstanceId, function_type: &str, demand: &Resources) {
        debug_assert!(self.can_hold(demand));
        self.used = self.used.saturating_add(demand);
        self.hosted.insert(instance);
        *self
            .hosted_types
            .entry(function_type.to_string())
            .or_default() += 1;
        self.instances_hosted_total += 1;
    }

    /// Returns `demand` to the pool.
    pub fn release(&mut self, demand: &Resources) -> Result<(), PlacementError> {
        self.used = self
            .used
            .checked_sub(demand)
            .ok_or(PlacementError::UnderflowViolation {
                node: self.id,
                demand: *demand,
            })?;
        Ok(())
    }

    /// Removes a hosted instance and releases its demand.
    pub(crate) fn evict(
        &mut self,
        instance: InstanceId,
        function_type: &str,
        demand: &Resources,
        now: SimTime,
    ) -> Result<(), PlacementError> {
        if self.hosted.remove(&instance) {
            self.release(demand)?;
            if let Some(n) = self.hosted_types.get_mut(function_type) {
                *n -= 1;
                if *n == 0 {
                    self.hosted_types.remove(function_type);
                }
            }
            if self.hosted.is_empty() {
                self.last_active_at = now;
            }
        }
        Ok(())
    }
}

/// Exact non-negative fraction compared by cross-multiplication.
#[derive(Debug, Clone, Copy)]
struct Frac {
    num: u128,
    den: u128,
}

impl PartialEq for Frac {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Frac {}

impl PartialOrd for Frac {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frac {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }
}

/// `cpu/cap_cpu + mem/cap_mem` as one fraction.
fn normalised_sum(cpu: u64, mem: u64, capacity: &Resources) -> Frac {
    let (cc, cm) = (capacity.cpu_millis as u128, capacity.mem_mb as u128);
    Frac {
        num: cpu as u128 * cm + mem as u128 * cc,
        den: cc * cm,
    }
}

/// Picks the host for one instance. `nodes` may be in any order; the answer
/// depends only on node contents and ids.
pub fn select_node(
    nodes: &[&ComputeNode],
    demand: &Resources,
    function_type: &str,
    strategy: PlacementKind,
) -> Option<NodeId> {
    let mut feasible: Vec<&ComputeNode> = nodes
        .iter()
        .copied()
        .filter(|n| n.capacity.cpu_millis > 0 && n.capacity.mem_mb > 0 && n.can_hold(demand))
        .collect();
    feasible.sort_by_key(|n| n.id);

    // Lowest id wins ties because `min_by_key`/`max_by` keep the first extreme.
    let first = |set: &[&ComputeNode]| set.first().map(|n| n.id);
    let minimise =
        |key: &dyn Fn(&ComputeNode) -> Frac| feasible.iter().min_by_key(|n| key(n)).map(|n| n.id);
    let maximise = |key: &dyn Fn(&ComputeNode) -> Frac| {
        feasible
            .iter()
            .fold(None::<(&ComputeNode, Frac)>, |best, n| {
                let score = key(n);
                match best {
                    Some((_, b)) if b >= score => best,
                    _ => Some((n, score)),
                }
            })
            .map(|(n, _)| n.id)
    };
    let remaining_after = |n: &ComputeNode| {
        let free = n.free();
        normalised_sum(
            free.cpu_millis - demand.cpu_millis,
            free.mem_mb - demand.mem_mb,
            &n.capacity,
        )
    };

    match strategy {
        PlacementKind::FirstFit => first(&feasible),
        PlacementKind::BestFit => minimise(&remaining_after),
        PlacementKind::WorstFit => maximise(&remaining_after),
        PlacementKind::LoadBalanced => {
            minimise(&|n| normalised_sum(n.used.cpu_millis, n.used.mem_mb, &n.capacity))
        }
        PlacementKind::CostOptimised => maximise(&|n| {
            let after = n.used.saturating_add(demand);
            normalised_sum(after.cpu_millis, after.mem_mb, &n.capacity)
        }),
        PlacementKind::Affinity | PlacementKind::AntiAffinity => {
            let want = strategy == PlacementKind::Affinity;
            let preferred: Vec<&ComputeNode> = feasible
                .iter()
                .copied()
                .filter(|n| n.hosts_type(function_type) == want)
                .collect();
            first(&preferred).or_else(|| first(&feasible))
        }
    }
}

/// Extension point for custom placement logic.
pub trait PlacementPolicy: Send + fmt::Debug {
    fn name(&self) -> &str;

    /// Chooses a node among `nodes` (live nodes, id order) for an instance of
    /// `function_type` needing `demand`, or `None` to request a new node.
    fn select(
        &self,
        nodes: &[&ComputeNode],
        demand: &Resources,
        function_type: &str,
    ) -> Option<NodeId>;
}

impl PlacementPolicy for PlacementKind {
    fn name(&self) -> &str {
        self.as_str()
    }

    fn select(
        &self,
        nodes: &[&ComputeNode],
        demand: &Resources,
        function_type: &str,
    ) -> Option<NodeId> {
        select_node(nodes, demand, function_type, *self)
    }
}
