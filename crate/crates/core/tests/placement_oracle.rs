//! `select_node` against a brute-force evaluator of each strategy's
//! objective, using exact rationals.

use faasim_core::placement::{select_node, ComputeNode, PlacementKind};
use faasim_core::{NodeId, Resources, SimTime};
use num_rational::Ratio;
use proptest::prelude::*;

type Q = Ratio<i128>;

fn frac(n: u64, d: u64) -> Q {
    Q::new(n as i128, d as i128)
}

/// Independent restatement of the seven objectives.
fn oracle(
    nodes: &[ComputeNode],
    demand: Resources,
    ty: &str,
    kind: PlacementKind,
) -> Option<NodeId> {
    let feasible: Vec<&ComputeNode> = nodes
        .iter()
        .filter(|n| {
            n.capacity.cpu_millis - n.used.cpu_millis >= demand.cpu_millis
                && n.capacity.mem_mb - n.used.mem_mb >= demand.mem_mb
        })
        .collect();
    let lowest = |set: &[&ComputeNode]| set.iter().map(|n| n.id).min();
    let arg = |score: &dyn Fn(&ComputeNode) -> Q, maximise: bool| {
        let best = feasible.iter().map(|n| score(n)).reduce(|a, b| {
            if (b > a) == maximise && b != a {
                b
            } else {
                a
            }
        })?;
        feasible
            .iter()
            .filter(|n| score(n) == best)
            .map(|n| n.id)
            .min()
    };
    let remaining = |n: &ComputeNode| {
        frac(
            n.capacity.cpu_millis - n.used.cpu_millis - demand.cpu_millis,
            n.capacity.cpu_millis,
        ) + frac(
            n.capacity.mem_mb - n.used.mem_mb - demand.mem_mb,
            n.capacity.mem_mb,
        )
    };
    let util_now = |n: &ComputeNode| {
        (frac(n.used.cpu_millis, n.capacity.cpu_millis) + frac(n.used.mem_mb, n.capacity.mem_mb))
            / Q::from_integer(2)
    };
    let util_after = |n: &ComputeNode| {
        (frac(n.used.cpu_millis + demand.cpu_millis, n.capacity.cpu_millis)
            + frac(n.used.mem_mb + demand.mem_mb, n.capacity.mem_mb))
            / Q::from_integer(2)
    };
    let hosts = |n: &&ComputeNode| n.hosted_types.get(ty).copied().unwrap_or(0) > 0;
    match kind {
        PlacementKind::FirstFit => lowest(&feasible),
        PlacementKind::BestFit => arg(&remaining, false),
        PlacementKind::WorstFit => arg(&remaining, true),
        PlacementKind::LoadBalanced => arg(&util_now, false),
        PlacementKind::CostOptimised => arg(&util_after, true),
        PlacementKind::Affinity => {
            let pref: Vec<_> = feasible.iter().copied().filter(hosts).collect();
            lowest(&pref).or_else(|| lowest(&feasible))
        }
        PlacementKind::AntiAffinity => {
            let pref: Vec<_> = feasible.iter().copied().filter(|n| !hosts(n)).collect();
            lowest(&pref).or_else(|| lowest(&feasible))
        }
    }
}

fn arb_node(id: u64) -> impl Strategy<Value = ComputeNode> {
    // Coarse grids make ties common.
    (1u64..=8, 1u64..=16, 0u64..=8, 0u64..=16, 0u32..3, 0u32..3).prop_map(
        move |(cpu, mem_units, cpu_used, mem_used, f, g)| {
            let capacity = Resources::new(cpu * 1000, mem_units * 64);
            let used = Resources::new(cpu_used.min(cpu) * 1000, mem_used.min(mem_units) * 64);
            let mut n = ComputeNode::new(NodeId(id), capacity, SimTime::ZERO);
            n.used = used;
            for (name, count) in [("f", f), ("g", g)] {
                if count > 0 {
                    n.hosted_types.insert(name.to_string(), count);
                }
            }
            n
        },
    )
}

fn arb_cluster() -> impl Strategy<Value = Vec<ComputeNode>> {
    (0usize..=5).prop_flat_map(|k| (1..=k as u64).map(arb_node).collect::<Vec<_>>())
}

fn arb_demand() -> impl Strategy<Value = Resources> {
    (1u64..=8, 1u64..=8).prop_map(|(c, m)| Resources::new(c * 500, m * 64))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1500))]

    #[test]
    fn every_strategy_matches_the_oracle(
        nodes in arb_cluster(),
        demand in arb_demand(),
        ty in prop::sample::select(vec!["f", "g"]),
        rotate in 0usize..5,
    ) {
        let mut order: Vec<&ComputeNode> = nodes.iter().collect();
        if !order.is_empty() {
            let len = order.len();
            order.rotate_left(rotate % len);
            order.reverse();
        }
        for kind in PlacementKind::ALL {
            let expected = oracle(&nodes, demand, ty, kind);
            let got = select_node(&order, &demand, ty, kind);
            prop_assert_eq!(got, expected, "{} on {:?}", kind, nodes);
            if let Some(id) = got {
                let n = nodes.iter().find(|n| n.id == id).unwrap();
                prop_assert!(n.can_hold(&demand));
            }
        }
    }
}

#[test]
fn documented_examples() {
    let node = |id, cap: (u64, u64), free: (u64, u64)| {
        let mut n = ComputeNode::new(NodeId(id), Resources::new(cap.0, cap.1), SimTime::ZERO);
        n.used = Resources::new(cap.0 - free.0, cap.1 - free.1);
        n
    };
    let n1 = node(1, (2000, 512), (500, 128));
    let n2 = node(2, (2000, 1024), (2000, 1024));
    let demand = Resources::new(1000, 256);
    assert_eq!(
        select_node(&[&n1, &n2], &demand, "f", PlacementKind::FirstFit),
        Some(NodeId(2))
    );

    let n1 = node(1, (2000, 512), (2000, 512));
    let n2 = node(2, (1000, 256), (1000, 256));
    assert_eq!(
        select_node(&[&n1, &n2], &demand, "f", PlacementKind::BestFit),
        Some(NodeId(2))
    );
    assert_eq!(
        select_node(&[&n1, &n2], &demand, "f", PlacementKind::WorstFit),
        Some(NodeId(1))
    );
}
