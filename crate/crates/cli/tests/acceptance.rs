//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use faasim_core::battleground::ArenaLabel;
use faasim_core::dispatch::{route, DispatchQueue, InstanceView, QueueEntry};
use faasim_core::placement::{select_node, ComputeNode};
use faasim_core::workload::{Burst, RatePhase, WorkloadMode, WorkloadSpec};
use faasim_core::{
    cost, load_scenario, Battleground, InstanceId, InstanceState, NodeId, PlacementKind, RequestId,
    RequestStatus, Resources, RoutingDecision, RoutingKind, SimCommand, SimConfig, SimTime,
    Simulation,
};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);
/// An instance row with the execution intervals of its requests.
type InstanceRun<'a> = (&'a Row, Vec<(u64, Option<u64>)>);

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_faasim")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir()
        .join(format!("faasim-acceptance-{}", std::process::id()))
        .join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("temp dir");
    dir
}

fn run_cli(args: &[&str]) -> Result<Duration, String> {
    let start = Instant::now();
    let out = Command::new(bin())
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    let took = start.elapsed();
    check!(
        out.status.success(),
        "faasim {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(took)
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// Independent CSV reading.

type Row = HashMap<String, String>;

struct Tables {
    requests: Vec<Row>,
    instances: Vec<Row>,
    nodes: Vec<Row>,
}

fn parse_export(text: &str) -> Result<Tables, String> {
    let mut sections: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    for block in text.split("\n\n") {
        let block = block.trim_start_matches('\n');
        let Some((title, body)) = block.split_once('\n') else {
            continue;
        };
        let mut reader = csv::Reader::from_reader(body.as_bytes());
        let headers = reader.headers().map_err(|e| e.to_string())?.clone();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| e.to_string())?;
            rows.push(
                headers
                    .iter()
                    .zip(record.iter())
                    .map(|(h, v)| (h.to_string(), v.to_string()))
                    .collect(),
            );
        }
        sections.insert(title.trim_start_matches("# ").to_string(), rows);
    }
    let mut take = |name: &str| {
        sections
            .remove(name)
            .ok_or_else(|| format!("export has no `{name}` table"))
    };
    Ok(Tables {
        requests: take("requests")?,
        instances: take("instances")?,
        nodes: take("nodes")?,
    })
}

fn field<'a>(row: &'a Row, col: &str) -> &'a str {
    row.get(col).map(String::as_str).unwrap_or("")
}

fn ms(row: &Row, col: &str) -> Option<u64> {
    let v = field(row, col);
    (!v.is_empty()).then(|| v.parse().expect("integer column"))
}

/// Decimal text to exact thousandths.
fn milli(text: &str) -> u128 {
    let (whole, frac) = text.split_once('.').unwrap_or((text, ""));
    assert!(frac.len() <= 3, "more than three decimals: {text}");
    let whole: u128 = whole.parse().expect("decimal");
    let frac: u128 = format!("{frac:0<3}").parse().expect("decimal");
    whole * 1000 + frac
}

fn live_at(created: u64, ended: Option<u64>, s: u64) -> bool {
    created <= s && ended.is_none_or(|e| e > s)
}

// ---------------------------------------------------------------------------
// 1. Determinism

fn determinism() -> Outcome {
    let args = |out: &Path| {
        vec![
            "run".to_string(),
            "--scenario".into(),
            "steady-state".into(),
            "--until".into(),
            "60000".into(),
            "--seed".into(),
            "7".into(),
            "--out".into(),
            out.display().to_string(),
        ]
    };
    let (a, b) = (scratch("det-a"), scratch("det-b"));
    let mut times = Vec::new();
    for dir in [&a, &b] {
        let owned = args(dir);
        let argv: Vec<&str> = owned.iter().map(String::as_str).collect();
        times.push(run_cli(&argv)?);
    }
    for file in ["events.ndjson", "export.csv", "summary.json"] {
        let (x, y) = (read(&a.join(file))?, read(&b.join(file))?);
        check!(!x.is_empty(), "{file} is empty");
        check!(x == y, "{file} differs between runs");
    }
    let slowest = times.iter().max().unwrap();
    check!(*slowest < Duration::from_secs(5), "run took {slowest:?}");
    let events = read(&a.join("events.ndjson"))?
        .iter()
        .filter(|b| **b == b'\n')
        .count();
    Ok(format!(
        "{events} log lines and export.csv byte-identical; slowest run {slowest:?}"
    ))
}

// ---------------------------------------------------------------------------
// 2. Placement oracle

type Q = Ratio<i128>;

fn q(n: u64, d: u64) -> Q {
    Q::new(n as i128, d as i128)
}

fn placement_oracle(
    nodes: &[ComputeNode],
    demand: Resources,
    ty: &str,
    kind: PlacementKind,
) -> Option<NodeId> {
    let fits = |n: &&ComputeNode| {
        n.used.cpu_millis + demand.cpu_millis <= n.capacity.cpu_millis
            && n.used.mem_mb + demand.mem_mb <= n.capacity.mem_mb
    };
    let feasible: Vec<&ComputeNode> = nodes.iter().filter(fits).collect();
    let first = |set: &[&ComputeNode]| set.iter().map(|n| n.id).min();
    let best_by = |score: &dyn Fn(&ComputeNode) -> Q, higher: bool| {
        let scores: Vec<(Q, NodeId)> = feasible.iter().map(|n| (score(n), n.id)).collect();
        let target = if higher {
            scores.iter().map(|s| s.0).max()
        } else {
            scores.iter().map(|s| s.0).min()
        }?;
        scores.iter().filter(|s| s.0 == target).map(|s| s.1).min()
    };
    let left_after = |n: &ComputeNode| {
        q(
            n.capacity.cpu_millis - n.used.cpu_millis - demand.cpu_millis,
            n.capacity.cpu_millis,
        ) + q(
            n.capacity.mem_mb - n.used.mem_mb - demand.mem_mb,
            n.capacity.mem_mb,
        )
    };
    let load_now = |n: &ComputeNode| {
        q(n.used.cpu_millis, n.capacity.cpu_millis) + q(n.used.mem_mb, n.capacity.mem_mb)
    };
    let load_after = |n: &ComputeNode| {
        q(n.used.cpu_millis + demand.cpu_millis, n.capacity.cpu_millis)
            + q(n.used.mem_mb + demand.mem_mb, n.capacity.mem_mb)
    };
    let hosts = |n: &&ComputeNode| n.hosted_types.get(ty).is_some_and(|c| *c > 0);
    match kind {
        PlacementKind::FirstFit => first(&feasible),
        PlacementKind::BestFit => best_by(&left_after, false),
        PlacementKind::WorstFit => best_by(&left_after, true),
        PlacementKind::LoadBalanced => best_by(&load_now, false),
        PlacementKind::CostOptimised => best_by(&load_after, true),
        PlacementKind::Affinity => {
            let with: Vec<_> = feasible.iter().copied().filter(hosts).collect();
            first(&with).or_else(|| first(&feasible))
        }
        PlacementKind::AntiAffinity => {
            let without: Vec<_> = feasible.iter().copied().filter(|n| !hosts(n)).collect();
            first(&without).or_else(|| first(&feasible))
        }
    }
}

fn random_cluster(rng: &mut ChaCha8Rng) -> Vec<ComputeNode> {
    let k = rng.random_range(0..=5);
    (1..=k)
        .map(|id| {
            let cpu = rng.random_range(1..=8u64);
            let mem = rng.random_range(1..=16u64) * 64;
            let mut n =
                ComputeNode::new(NodeId(id), Resources::new(cpu * 1000, mem), SimTime::ZERO);
            // Half-vCPU and 64 MB steps keep ties frequent.
            n.used = Resources::new(
                rng.random_range(0..=cpu * 2) * 500,
                rng.random_range(0..=mem / 64) * 64,
            );
            for ty in ["f", "g"] {
                if rng.random_bool(0.4) {
                    n.hosted_types.insert(ty.into(), rng.random_range(1..3));
                }
            }
            n
        })
        .collect()
}

fn placement() -> Outcome {
    const CASES: usize = 2000;
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37);
    let mut mismatches = Vec::new();
    let mut ties = 0;
    for kind in PlacementKind::ALL {
        for _ in 0..CASES {
            let nodes = random_cluster(&mut rng);
            let demand = Resources::new(
                rng.random_range(1..=8u64) * 500,
                rng.random_range(1..=8u64) * 64,
            );
            let ty = if rng.random_bool(0.5) { "f" } else { "g" };
            let want = placement_oracle(&nodes, demand, ty, kind);
            let mut order: Vec<&ComputeNode> = nodes.iter().collect();
            for shuffle in 0..3 {
                if shuffle > 0 {
                    for i in (1..order.len()).rev() {
                        order.swap(i, rng.random_range(0..=i));
                    }
                }
                let got = select_node(&order, &demand, ty, kind);
                if got != want {
                    mismatches.push(format!("{kind}: got {got:?} want {want:?}"));
                }
            }
            let distinct: std::collections::BTreeSet<_> = nodes
                .iter()
                .map(|n| {
                    (
                        n.used.cpu_millis,
                        n.used.mem_mb,
                        n.capacity.cpu_millis,
                        n.capacity.mem_mb,
                    )
                })
                .collect();
            if distinct.len() < nodes.len() {
                ties += 1;
            }
        }
    }
    check!(
        mismatches.is_empty(),
        "{} mismatches, first: {}",
        mismatches.len(),
        mismatches[0]
    );
    Ok(format!(
        "7 strategies x {CASES} clusters x 3 orderings, 0 mismatches ({ties} clusters with duplicate nodes)"
    ))
}

// ---------------------------------------------------------------------------
// 3. Routing properties

fn is_available(v: &InstanceView) -> bool {
    matches!(v.state, InstanceState::Warm | InstanceState::Busy)
        && v.in_flight < v.concurrency_limit
}

fn routing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut decisions = 0u64;
    let mut violations: Vec<String> = Vec::new();

    // Least connections against brute force, on random sets of up to six.
    for _ in 0..40_000 {
        let views = random_views(&mut rng);
        let avail: Vec<&InstanceView> = views.iter().filter(|v| is_available(v)).collect();
        let want = avail
            .iter()
            .filter(|v| avail.iter().all(|w| v.in_flight <= w.in_flight))
            .map(|v| v.id)
            .min();
        let got = match route(
            &views,
            RoutingKind::LeastConnections.policy().as_mut(),
            false,
        ) {
            RoutingDecision::Assign(id) => Some(id),
            _ => None,
        };
        decisions += 1;
        if got != want {
            violations.push(format!("least_connections {got:?} vs {want:?}"));
        }
    }

    // Round robin: k warm instances, m·k requests, exactly m each.
    for _ in 0..2_000 {
        let k = rng.random_range(1..=6usize);
        let m = rng.random_range(1..=12u32);
        let mut views: Vec<InstanceView> = (1..=k as u64)
            .map(|i| InstanceView {
                id: InstanceId(i),
                state: InstanceState::Warm,
                in_flight: 0,
                concurrency_limit: m,
            })
            .collect();
        let mut policy = RoutingKind::RoundRobin.policy();
        let mut counts = vec![0u32; k];
        for _ in 0..(m as usize * k) {
            decisions += 1;
            match route(&views, policy.as_mut(), false) {
                RoutingDecision::Assign(id) => {
                    let v = &mut views[id.0 as usize - 1];
                    v.in_flight += 1;
                    v.state = InstanceState::Busy;
                    counts[id.0 as usize - 1] += 1;
                }
                other => violations.push(format!("round_robin declined: {other:?}")),
            }
        }
        if counts.iter().any(|c| *c != m) {
            violations.push(format!("round_robin unfair: {counts:?} for m={m}"));
        }
    }

    // Concurrency: long random routing/completion sequences under every policy.
    for _ in 0..300 {
        let kind = RoutingKind::ALL[rng.random_range(0..3)];
        let mut policy = kind.policy();
        let mut views = random_views(&mut rng);
        for _ in 0..150 {
            if rng.random_bool(0.6) {
                decisions += 1;
                if let RoutingDecision::Assign(id) = route(&views, policy.as_mut(), true) {
                    let v = views.iter_mut().find(|v| v.id == id).unwrap();
                    if !is_available(v) {
                        violations.push(format!("{kind} chose unavailable {id}"));
                    }
                    v.in_flight += 1;
                    v.state = InstanceState::Busy;
                    if v.in_flight > v.concurrency_limit {
                        violations.push(format!("{kind} exceeded the limit on {id}"));
                    }
                }
            } else {
                let n = views.len();
                let v = &mut views[rng.random_range(0..n)];
                if v.in_flight > 0 {
                    v.in_flight -= 1;
                    if v.in_flight == 0 {
                        v.state = InstanceState::Warm;
                    }
                } else if v.state == InstanceState::ColdStarting {
                    v.state = InstanceState::Warm;
                }
            }
        }
    }

    // FIFO: the queue against a plain deque.
    let mut queue = DispatchQueue::default();
    let mut model: VecDeque<RequestId> = VecDeque::new();
    for t in 0..20_000u64 {
        let id = RequestId(rng.random_range(0..64));
        match rng.random_range(0..3) {
            0 => {
                let dup = model.contains(&id);
                let pushed = queue.push(QueueEntry {
                    request: id,
                    enqueue_time: SimTime(t),
                    ttl_deadline: SimTime(t + 100),
                });
                if pushed.is_ok() == dup {
                    violations.push(format!("push {id} accepted={}", pushed.is_ok()));
                }
                if !dup {
                    model.push_back(id);
                }
            }
            1 => {
                if queue.pop_front().map(|e| e.request) != model.pop_front() {
                    violations.push("pop order".into());
                }
            }
            _ => {
                let pos = model.iter().position(|r| *r == id);
                let expected = pos.map(|p| model.remove(p).unwrap());
                if queue.remove(id).map(|e| e.request) != expected {
                    violations.push(format!("remove {id}"));
                }
            }
        }
    }

    // FIFO end to end: dispatch order follows enqueue order per type.
    let mut engine_dispatches = 0;
    for seed in 0..12u64 {
        let cfg = SimConfig {
            routing_strategy: RoutingKind::ALL[seed as usize % 3],
            concurrency_limit: 1 + (seed % 3) as u32,
            max_instances: 3,
            request_ttl_ms: 4000,
            exec_jitter: 0.4,
            seed,
            workload: WorkloadSpec {
                rate: 9.0,
                jitter: 0.5,
                bursts: vec![Burst {
                    at_ms: 3000,
                    count: 25,
                    function_type: None,
                }],
                ..WorkloadSpec::default()
            },
            ..SimConfig::default()
        };
        let mut sim = Simulation::new(cfg).map_err(|e| e.to_string())?;
        sim.run_until(SimTime(30_000));
        let mut order: Vec<(SimTime, RequestId, SimTime)> = sim
            .requests()
            .filter_map(|r| Some((r.enqueue_time?, r.id, r.dispatch_time?)))
            .collect();
        order.sort();
        engine_dispatches += order.len();
        if order.windows(2).any(|w| w[0].2 > w[1].2) {
            violations.push(format!("engine dispatch out of order (seed {seed})"));
        }
    }

    check!(decisions >= 100_000, "only {decisions} decisions");
    check!(
        violations.is_empty(),
        "{} violations, first: {}",
        violations.len(),
        violations[0]
    );
    Ok(format!(
        "{decisions} routing decisions, 20000 queue ops, {engine_dispatches} engine dispatches, 0 violations"
    ))
}

fn random_views(rng: &mut ChaCha8Rng) -> Vec<InstanceView> {
    let n = rng.random_range(1..=6u64);
    (1..=n)
        .map(|i| {
            let limit = rng.random_range(1..=4);
            let (state, in_flight) = match rng.random_range(0..3) {
                0 => (InstanceState::ColdStarting, 0),
                1 => (InstanceState::Warm, 0),
                _ => (InstanceState::Busy, rng.random_range(1..=limit)),
            };
            InstanceView {
                id: InstanceId(i),
                state,
                in_flight,
                concurrency_limit: limit,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// 4. Cold start

/// FIFO list schedule: start times of `n` jobs released at 0 on `servers`
/// machines first free at `ready`.
fn list_schedule(n: usize, servers: usize, ready: u64, service: u64) -> Vec<u64> {
    let mut free = vec![ready; servers];
    (0..n)
        .map(|_| {
            let i = (0..servers).min_by_key(|&i| (free[i], i)).unwrap();
            let start = free[i];
            free[i] += service;
            start
        })
        .collect()
}

fn burst(count: u32) -> WorkloadSpec {
    WorkloadSpec {
        mode: WorkloadMode::Manual,
        bursts: vec![Burst {
            at_ms: 0,
            count,
            function_type: None,
        }],
        ..WorkloadSpec::default()
    }
}

fn cold_start() -> Outcome {
    let cfg = SimConfig {
        cold_start_delay_ms: 1000,
        exec_base_ms: [("f".to_string(), 500)].into(),
        exec_jitter: 0.0,
        concurrency_limit: 1,
        max_instances: 2,
        request_ttl_ms: 100_000,
        workload: burst(10),
        ..SimConfig::default()
    };
    let mut sim = Simulation::new(cfg).map_err(|e| e.to_string())?;
    sim.run_until(SimTime(20_000));
    let expected = list_schedule(10, 2, 1000, 500);
    let mut waits = Vec::new();
    for r in sim.requests() {
        check!(
            r.status == RequestStatus::Succeeded,
            "{} is {:?}",
            r.id,
            r.status
        );
        let wait = r.dispatch_time.unwrap().since(r.enqueue_time.unwrap());
        let inst = sim.instance(r.assigned_instance.unwrap()).unwrap();
        let cold_served = inst.created_at >= r.enqueue_time.unwrap();
        check!(
            !cold_served || wait >= 1000,
            "{} cold-served after {wait} ms",
            r.id
        );
        waits.push(wait);
    }
    check!(
        waits == expected,
        "waits {waits:?} != schedule {expected:?}"
    );
    Ok(format!(
        "queue waits {waits:?} match the hand schedule exactly"
    ))
}

// ---------------------------------------------------------------------------
// 5. Scaling

fn scaling_config(max_instances: u32) -> SimConfig {
    SimConfig {
        cold_start_delay_ms: 1000,
        exec_base_ms: [("f".to_string(), 500)].into(),
        concurrency_limit: 1,
        max_instances,
        inactivity_timeout_ms: 3000,
        request_ttl_ms: 60_000,
        workload: WorkloadSpec {
            mode: WorkloadMode::Scenario,
            jitter: 0.0,
            phases: vec![
                RatePhase {
                    from_ms: 0,
                    until_ms: Some(4000),
                    rate: 2.0,
                },
                RatePhase {
                    from_ms: 4000,
                    until_ms: Some(8000),
                    rate: 4.0,
                },
                RatePhase {
                    from_ms: 8000,
                    until_ms: Some(12_000),
                    rate: 8.0,
                },
            ],
            ..WorkloadSpec::default()
        },
        ..SimConfig::default()
    }
}

struct ScaleOutcome {
    peak: usize,
    last_completion: u64,
    all_gone_at: u64,
}

fn scaling_run(max_instances: u32) -> Result<ScaleOutcome, String> {
    let cfg = scaling_config(max_instances);
    let timeout = cfg.inactivity_timeout_ms;
    let period = (timeout / 4).max(100);
    let mut sim = Simulation::new(cfg).map_err(|e| e.to_string())?;
    let mut peak = 0;
    while let Some(ev) = sim.step() {
        let live = sim.instances().filter(|i| i.state.is_live()).count();
        check!(live <= max_instances as usize, "{live} live at {}", ev.time);
        peak = peak.max(live);
        if ev.time > SimTime(120_000) {
            break;
        }
    }
    let last_completion = sim
        .requests()
        .filter_map(|r| r.end_time)
        .max()
        .unwrap()
        .millis();
    check!(
        sim.requests().all(|r| r.status == RequestStatus::Succeeded),
        "not every request succeeded"
    );
    // Each instance goes on the first sweep at or after idle + timeout.
    let grid = |t: u64| t.div_ceil(period) * period;
    let mut all_gone_at = 0;
    for inst in sim.instances() {
        let idle_since = sim
            .requests()
            .filter(|r| r.assigned_instance == Some(inst.id))
            .filter_map(|r| r.end_time)
            .max()
            .unwrap_or(inst.cold_ready_at)
            .millis();
        let want = grid(idle_since + timeout);
        let got = inst.ended_at.map(SimTime::millis);
        check!(
            inst.state == InstanceState::Terminated,
            "{} is {:?}",
            inst.id,
            inst.state
        );
        check!(
            got == Some(want),
            "{} reaped at {got:?}, expected {want}",
            inst.id
        );
        all_gone_at = all_gone_at.max(want);
    }
    for node in sim.nodes() {
        let emptied = sim
            .instances()
            .filter(|i| i.node_id == node.id)
            .filter_map(|i| i.ended_at)
            .max()
            .unwrap()
            .millis();
        let want = grid(emptied + timeout);
        let got = node.ended_at.map(SimTime::millis);
        check!(
            got == Some(want),
            "{} released at {got:?}, expected {want}",
            node.id
        );
    }
    check!(
        all_gone_at <= last_completion + timeout + period,
        "instances outlive the decay bound: {all_gone_at} > {last_completion} + {timeout} + {period}"
    );
    Ok(ScaleOutcome {
        peak,
        last_completion,
        all_gone_at,
    })
}

fn scaling() -> Outcome {
    // Peak demand: 8 req/s x 0.5 s of service = 4 busy instances at once.
    let steady_need = (8.0f64 * 0.5).ceil() as usize;
    let capped = scaling_run(3)?;
    check!(capped.peak == 3, "capped peak {} != 3", capped.peak);
    let open = scaling_run(16)?;
    check!(
        open.peak >= steady_need && open.peak < 16,
        "uncapped peak {} outside [{steady_need}, 16)",
        open.peak
    );
    Ok(format!(
        "peak {} at cap 3, {} uncapped; last completion {} ms, all instances gone at {} ms; reap times exact",
        capped.peak, open.peak, open.last_completion, open.all_gone_at
    ))
}

// ---------------------------------------------------------------------------
// 6. Failure semantics

fn failure() -> Outcome {
    let mut cfg = load_scenario("node-failure-drill")
        .map_err(|e| e.to_string())?
        .config;
    cfg.node_failures.clear();
    let dir = scratch("failure");
    let cfg_path = dir.join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap())
        .map_err(|e| e.to_string())?;

    // In-flight count on N1 just before the failure instant, from a run
    // without the failure.
    let mut probe = Simulation::new(cfg.clone()).map_err(|e| e.to_string())?;
    probe.run_until(SimTime(4999));
    let f: usize = probe
        .instances()
        .filter(|i| i.node_id == NodeId(1) && i.state.is_live())
        .map(|i| i.in_flight.len())
        .sum();
    check!(f > 0, "nothing in flight on N1 at 5000; scenario too light");

    let out = dir.join("out");
    run_cli(&[
        "run",
        "--scenario",
        cfg_path.to_str().unwrap(),
        "--until",
        "30000",
        "--fail-node",
        "N1@5000",
        "--out",
        out.to_str().unwrap(),
    ])?;
    let log = String::from_utf8(read(&out.join("events.ndjson"))?).unwrap();
    let failed_events: Vec<Value> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v["kind"] == "NodeFailed")
        .collect();
    check!(
        failed_events.len() == 1,
        "{} NodeFailed records",
        failed_events.len()
    );
    check!(
        failed_events[0]["time"] == 5000,
        "NodeFailed at {}",
        failed_events[0]["time"]
    );

    let csv = String::from_utf8(read(&out.join("export.csv"))?).unwrap();
    let t = parse_export(&csv)?;
    let down: Vec<&Row> = t
        .requests
        .iter()
        .filter(|r| field(r, "status") == "FailedNodeDown")
        .collect();
    check!(
        down.len() == f,
        "{} FailedNodeDown, expected {f}",
        down.len()
    );
    check!(
        down.iter().all(|r| ms(r, "end_ms") == Some(5000)),
        "FailedNodeDown outside t=5000"
    );
    for r in t.requests.iter().filter(|r| field(r, "node_id") == "N1") {
        check!(
            ms(r, "exec_start_ms").unwrap() <= 5000,
            "request {} started on N1 after the failure",
            field(r, "request_id")
        );
    }
    let n1_instances: Vec<&str> = t
        .instances
        .iter()
        .filter(|i| field(i, "node_id") == "N1")
        .map(|i| field(i, "instance_id"))
        .collect();
    check!(
        t.requests.iter().all(|r| {
            !n1_instances.contains(&field(r, "instance_id"))
                || ms(r, "dispatch_ms").is_some_and(|d| d <= 5000)
        }),
        "post-failure assignment to an N1 instance"
    );
    let replacement: Vec<&str> = t
        .nodes
        .iter()
        .filter(|n| ms(n, "provisioned_ms").is_some_and(|p| p >= 5000))
        .map(|n| field(n, "node_id"))
        .collect();
    let later_ok = t
        .requests
        .iter()
        .filter(|r| field(r, "status") == "Succeeded")
        .filter(|r| ms(r, "exec_start_ms").unwrap() > 5000)
        .filter(|r| field(r, "node_id") != "N1")
        .collect::<Vec<_>>();
    check!(!later_ok.is_empty(), "no successes after the failure");
    let on_replacement = later_ok
        .iter()
        .filter(|r| replacement.contains(&field(r, "node_id")))
        .count();
    check!(
        on_replacement > 0,
        "no success on a node provisioned after the failure"
    );

    // Accounting closure at every event of the same run.
    cfg.node_failures = vec![faasim_core::ScriptedFailure {
        node: NodeId(1),
        at_ms: 5000,
    }];
    let mut sim = Simulation::new(cfg).map_err(|e| e.to_string())?;
    let mut events = 0;
    while let Some(ev) = sim.step() {
        if ev.time > SimTime(30_000) {
            break;
        }
        events += 1;
        let s = sim.cumulative_stats();
        let in_system = sim.requests().filter(|r| !r.status.is_terminal()).count() as u64;
        check!(
            s.total_created == s.total_succeeded + s.total_failed + s.in_system
                && s.in_system == in_system
                && s.total_created == sim.requests().count() as u64,
            "closure broken at {}",
            ev.time
        );
    }
    Ok(format!(
        "f={f} in flight on N1 -> {f} FailedNodeDown at 5000; {} later successes ({on_replacement} on replacement {}); closure held over {events} events",
        later_ok.len(),
        replacement.join(",")
    ))
}

// ---------------------------------------------------------------------------
// 7. Cost

fn cost_model() -> Outcome {
    check!(
        cost(2000, 128).to_string() == "256",
        "cost(2000, 128) = {}",
        cost(2000, 128)
    );
    let dir = scratch("cost");
    run_cli(&[
        "run",
        "--scenario",
        "steady-state",
        "--until",
        "25000",
        "--out",
        dir.to_str().unwrap(),
    ])?;
    let t = parse_export(&String::from_utf8(read(&dir.join("export.csv"))?).unwrap())?;
    let summary: Value = serde_json::from_slice(&read(&dir.join("summary.json"))?).unwrap();
    let mem: HashMap<&str, u64> = t
        .instances
        .iter()
        .map(|i| (field(i, "instance_id"), field(i, "mem_mb").parse().unwrap()))
        .collect();
    let succeeded: Vec<&Row> = t
        .requests
        .iter()
        .filter(|r| field(r, "status") == "Succeeded")
        .collect();
    check!(succeeded.len() >= 100, "only {} successes", succeeded.len());
    let mut total = Ratio::<u128>::from_integer(0);
    for r in &succeeded {
        let exec = ms(r, "execution_ms").unwrap() as u128;
        let m = mem[field(r, "instance_id")] as u128;
        let each = Ratio::new(exec, 1000) * Ratio::from_integer(m);
        check!(
            Ratio::new(milli(field(r, "cost")), 1000) == each,
            "row cost {} != {each}",
            field(r, "cost")
        );
        total += each;
    }
    let reported = summary["stats"]["cumulative_cost_exact"].as_str().unwrap();
    check!(
        Ratio::new(milli(reported), 1000) == total,
        "cumulative {reported} != {total}"
    );
    Ok(format!(
        "{} successes sum to exactly {reported}; cost(2000 ms, 128 MB) = 256",
        succeeded.len()
    ))
}

// ---------------------------------------------------------------------------
// 8. TTL

fn ttl() -> Outcome {
    let (servers, service, ttl, b) = (2usize, 200u64, 3000u64, 200usize);
    let cfg = SimConfig {
        cold_start_delay_ms: 0,
        node_startup_delay_ms: 0,
        exec_base_ms: [("f".to_string(), service)].into(),
        exec_jitter: 0.0,
        concurrency_limit: 1,
        max_instances: servers as u32,
        request_ttl_ms: ttl,
        max_execution_timeout_ms: 100_000,
        workload: burst(b as u32),
        ..SimConfig::default()
    };
    let capacity_per_s = servers as u64 * 1000 / service;
    let by_formula = b - (capacity_per_s * ttl / 1000) as usize;
    let by_schedule = list_schedule(b, servers, 0, service)
        .into_iter()
        .filter(|s| *s >= ttl)
        .count();
    check!(
        by_formula == by_schedule,
        "hand derivations disagree: {by_formula} vs {by_schedule}"
    );
    let mut sim = Simulation::new(cfg).map_err(|e| e.to_string())?;
    sim.run_until(SimTime(60_000));
    let stats = sim.cumulative_stats();
    check!(
        stats.failed_by_cause.ttl == by_formula as u64,
        "{} FailedTtl, expected {by_formula}",
        stats.failed_by_cause.ttl
    );
    check!(
        stats.total_succeeded == (b - by_formula) as u64,
        "{} succeeded",
        stats.total_succeeded
    );
    Ok(format!(
        "c={capacity_per_s}/s, TTL {ttl} ms, burst {b}: {by_formula} FailedTtl as derived"
    ))
}

// ---------------------------------------------------------------------------
// 9. Battleground

fn battleground() -> Outcome {
    for name in ["steady-state", "node-failure-drill", "cold-start-burst"] {
        let cfg = load_scenario(name).map_err(|e| e.to_string())?.config;
        let mut bg =
            Battleground::create(cfg.clone(), cfg.clone(), cfg.seed).map_err(|e| e.to_string())?;
        bg.advance_to(SimTime(60_000));
        let r = bg.report();
        check!(!r.series.is_empty(), "{name}: empty series");
        for p in &r.series {
            check!(
                p.queue_length[0] == p.queue_length[1]
                    && p.cpu_utilisation[0] == p.cpu_utilisation[1]
                    && p.mem_utilisation[0] == p.mem_utilisation[1]
                    && p.active_instances[0] == p.active_instances[1]
                    && p.cumulative_cost[0] == p.cumulative_cost[1],
                "{name}: paired series differ at {}",
                p.time_ms
            );
        }
        let (a, b) = (&bg.arena(ArenaLabel::A).sim, &bg.arena(ArenaLabel::B).sim);
        check!(a.log() == b.log(), "{name}: logs differ");
    }

    let duel = load_scenario("strategy-duel").map_err(|e| e.to_string())?;
    let (ca, cb) = (duel.config.clone(), duel.config_b.clone().unwrap());
    check!(
        ca.routing_strategy == RoutingKind::WarmPriority
            && cb.routing_strategy == RoutingKind::RoundRobin,
        "duel strategies changed"
    );
    let mut bg =
        Battleground::create(ca.clone(), cb.clone(), ca.seed).map_err(|e| e.to_string())?;
    bg.advance_to(SimTime(60_000));
    let r = bg.report();
    let (wp, rr) = (r.arenas[0].cold_starts, r.arenas[1].cold_starts);
    check!(
        wp <= rr,
        "warm_priority {wp} cold starts > round_robin {rr}"
    );

    // Isolation: commands to A leave B's state hash where an untouched
    // twin has it.
    let mut touched = Battleground::create(ca.clone(), cb.clone(), ca.seed).unwrap();
    let mut twin = Battleground::create(ca.clone(), cb, ca.seed).unwrap();
    let commands = [
        SimCommand::InjectRequests {
            n: 7,
            function_type: None,
        },
        SimCommand::UpdateConfig {
            config: serde_json::json!({"routing_strategy": "least_connections", "cold_start_delay_ms": 10}),
        },
        SimCommand::FailNode { node_id: NodeId(1) },
        SimCommand::ResetSession,
    ];
    for (i, cmd) in commands.into_iter().enumerate() {
        touched.step_lockstep(4000 + i as u64 * 1500);
        twin.step_lockstep(4000 + i as u64 * 1500);
        let before = touched.arena(ArenaLabel::B).sim.state_digest();
        let _ = touched.apply(ArenaLabel::A, cmd);
        check!(
            touched.arena(ArenaLabel::B).sim.state_digest() == before,
            "B changed when A was commanded"
        );
    }
    touched.step_lockstep(20_000);
    twin.step_lockstep(20_000);
    let (hb, tb) = (
        touched.arena(ArenaLabel::B).sim.state_digest(),
        twin.arena(ArenaLabel::B).sim.state_digest(),
    );
    check!(hb == tb, "B diverged from its twin");
    check!(
        touched.arena(ArenaLabel::A).sim.state_digest()
            != twin.arena(ArenaLabel::A).sim.state_digest(),
        "A unaffected by its own commands"
    );
    Ok(format!(
        "identical arenas match on 3 scenarios; strategy-duel cold starts WP {wp} <= RR {rr}; B hash {hb:016x} unchanged by A commands"
    ))
}

// ---------------------------------------------------------------------------
// 10. CSV round trip against the live service

struct Server {
    child: Child,
    base: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn start_server() -> Result<Server, String> {
    let mut child = Command::new(bin())
        .args([
            "serve",
            "--port",
            "0",
            "--pace",
            "0",
            "--scenario",
            "steady-state",
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .map_err(|e| e.to_string())?;
    let base = line
        .trim()
        .strip_prefix("listening on ")
        .ok_or_else(|| format!("unexpected banner `{line}`"))?
        .to_string();
    Ok(Server { child, base })
}

fn csv_round_trip() -> Outcome {
    let server = start_server()?;
    let http = reqwest::blocking::Client::new();
    let post = |body: Value| -> Result<Value, String> {
        http.post(format!("{}/command", server.base))
            .json(&body)
            .send()
            .and_then(|r| r.json())
            .map_err(|e| e.to_string())
    };
    let get = |path: &str| {
        http.get(format!("{}{path}", server.base))
            .send()
            .and_then(|r| r.text())
            .map_err(|e| e.to_string())
    };
    post(serde_json::json!({"kind": "Start"}))?;
    std::thread::sleep(Duration::from_millis(150));
    let paused = post(serde_json::json!({"kind": "Pause"}))?;
    let metrics: Value = serde_json::from_str(&get("/metrics")?).map_err(|e| e.to_string())?;
    let csv = get("/export.csv")?;
    drop(server);

    let now = metrics["time_ms"].as_u64().unwrap();
    check!(
        paused["time_ms"].as_u64() == Some(now),
        "metrics not at the pause time"
    );
    check!(now > 5000, "service barely ran ({now} ms)");
    let interval = load_scenario("steady-state")
        .unwrap()
        .config
        .sample_interval_ms;
    let t = parse_export(&csv)?;

    // Cumulative totals.
    let status = |r: &Row| field(r, "status").to_string();
    let count = |s: &str| t.requests.iter().filter(|r| status(r) == s).count() as u64;
    let succeeded: Vec<&Row> = t
        .requests
        .iter()
        .filter(|r| status(r) == "Succeeded")
        .collect();
    let mean = |col: &str| {
        let sum: u128 = succeeded.iter().map(|r| ms(r, col).unwrap() as u128).sum();
        (!succeeded.is_empty()).then(|| sum as f64 / succeeded.len() as f64)
    };
    let cost_total: u128 = succeeded.iter().map(|r| milli(field(r, "cost"))).sum();
    let failed = count("FailedTtl") + count("FailedExecTimeout") + count("FailedNodeDown");
    let c = &metrics["cumulative"];
    let mut mismatches = Vec::new();
    compare(
        &mut mismatches,
        "total_created",
        &c["total_created"],
        t.requests.len().into(),
    );
    compare(
        &mut mismatches,
        "total_succeeded",
        &c["total_succeeded"],
        succeeded.len().into(),
    );
    compare(
        &mut mismatches,
        "total_failed",
        &c["total_failed"],
        failed.into(),
    );
    compare(
        &mut mismatches,
        "ttl",
        &c["failed_by_cause"]["ttl"],
        count("FailedTtl").into(),
    );
    compare(
        &mut mismatches,
        "exec_timeout",
        &c["failed_by_cause"]["exec_timeout"],
        count("FailedExecTimeout").into(),
    );
    compare(
        &mut mismatches,
        "node_down",
        &c["failed_by_cause"]["node_down"],
        count("FailedNodeDown").into(),
    );
    compare(
        &mut mismatches,
        "in_system",
        &c["in_system"],
        (t.requests
            .iter()
            .filter(|r| field(r, "end_ms").is_empty())
            .count())
        .into(),
    );
    compare(
        &mut mismatches,
        "cold_starts",
        &c["cold_starts"],
        t.instances.len().into(),
    );
    compare(
        &mut mismatches,
        "avg_end_to_end_ms",
        &c["avg_end_to_end_ms"],
        mean("end_to_end_ms").into(),
    );
    compare(
        &mut mismatches,
        "avg_queue_wait_ms",
        &c["avg_queue_wait_ms"],
        mean("queue_wait_ms").into(),
    );
    compare(
        &mut mismatches,
        "avg_execution_ms",
        &c["avg_execution_ms"],
        mean("execution_ms").into(),
    );
    let exact = {
        let (w, f) = (cost_total / 1000, cost_total % 1000);
        if f == 0 {
            w.to_string()
        } else {
            format!("{w}.{}", format!("{f:03}").trim_end_matches('0'))
        }
    };
    compare(
        &mut mismatches,
        "cumulative_cost_exact",
        &c["cumulative_cost_exact"],
        exact.into(),
    );
    compare(
        &mut mismatches,
        "cumulative_cost",
        &c["cumulative_cost"],
        (cost_total as f64 / 1000.0).into(),
    );

    // Time series rebuilt from the entity intervals.
    let req_on = |inst: &str| -> Vec<(u64, Option<u64>)> {
        t.requests
            .iter()
            .filter(|r| field(r, "instance_id") == inst)
            .filter_map(|r| Some((ms(r, "exec_start_ms")?, ms(r, "end_ms"))))
            .collect()
    };
    let inst_runs: Vec<InstanceRun> = t
        .instances
        .iter()
        .map(|i| (i, req_on(field(i, "instance_id"))))
        .collect();
    let series = metrics["series"].as_array().unwrap();
    let expected_samples = now / interval;
    compare(
        &mut mismatches,
        "samples",
        &c["samples"],
        expected_samples.into(),
    );
    let (mut cpu_sum, mut mem_sum) = (0.0f64, 0.0f64);
    for (k, point) in
        (1..=expected_samples).zip(series.iter().chain(std::iter::repeat(&Value::Null)))
    {
        let s = k * interval;
        let mut rebuilt = serde_json::Map::new();
        let queued = t
            .requests
            .iter()
            .filter(|r| {
                ms(r, "enqueue_ms").is_some_and(|e| e <= s)
                    && !ms(r, "dispatch_ms").is_some_and(|d| d <= s)
                    && !ms(r, "end_ms").is_some_and(|e| e <= s)
            })
            .count();
        let (mut cold, mut warm, mut busy) = (0u64, 0u64, 0u64);
        let mut used: HashMap<&str, (u128, u128)> = HashMap::new();
        for (inst, runs) in &inst_runs {
            if !live_at(ms(inst, "created_ms").unwrap(), ms(inst, "ended_ms"), s) {
                continue;
            }
            let u = used.entry(field(inst, "node_id")).or_default();
            u.0 += milli(field(inst, "cpu"));
            u.1 += field(inst, "mem_mb").parse::<u128>().unwrap();
            if ms(inst, "ready_ms").unwrap() > s {
                cold += 1;
            } else if runs.iter().any(|&(st, end)| live_at(st, end, s)) {
                busy += 1;
            } else {
                warm += 1;
            }
        }
        let (mut active_nodes, mut used_cpu, mut used_mem, mut cap_cpu, mut cap_mem) =
            (0u64, 0u128, 0u128, 0u128, 0u128);
        for n in &t.nodes {
            if !live_at(ms(n, "provisioned_ms").unwrap(), ms(n, "ended_ms"), s) {
                continue;
            }
            active_nodes += 1;
            cap_cpu += milli(field(n, "cpu_capacity"));
            cap_mem += field(n, "mem_capacity_mb").parse::<u128>().unwrap();
            if let Some(u) = used.get(field(n, "node_id")) {
                used_cpu += u.0;
                used_mem += u.1;
            }
        }
        let ratio = |a: u128, b: u128| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (cpu, mem) = (ratio(used_cpu, cap_cpu), ratio(used_mem, cap_mem));
        cpu_sum += cpu;
        mem_sum += mem;
        let done: Vec<&Row> = t
            .requests
            .iter()
            .filter(|r| ms(r, "end_ms").is_some_and(|e| e <= s))
            .collect();
        let ok: Vec<&&Row> = done.iter().filter(|r| status(r) == "Succeeded").collect();
        let e2e: u128 = ok
            .iter()
            .map(|r| ms(r, "end_to_end_ms").unwrap() as u128)
            .sum();
        let cost_s: u128 = ok.iter().map(|r| milli(field(r, "cost"))).sum();
        rebuilt.insert("time_ms".into(), s.into());
        rebuilt.insert("queue_length".into(), queued.into());
        rebuilt.insert("active_instances".into(), (cold + warm + busy).into());
        rebuilt.insert("cold_starting".into(), cold.into());
        rebuilt.insert("warm".into(), warm.into());
        rebuilt.insert("busy".into(), busy.into());
        rebuilt.insert("active_nodes".into(), active_nodes.into());
        rebuilt.insert("cpu_utilisation".into(), cpu.into());
        rebuilt.insert("mem_utilisation".into(), mem.into());
        rebuilt.insert("total_succeeded".into(), ok.len().into());
        rebuilt.insert("total_failed".into(), (done.len() - ok.len()).into());
        rebuilt.insert("cumulative_cost".into(), (cost_s as f64 / 1000.0).into());
        rebuilt.insert(
            "avg_end_to_end_ms".into(),
            (!ok.is_empty())
                .then(|| e2e as f64 / ok.len() as f64)
                .into(),
        );
        let rebuilt = Value::Object(rebuilt);
        if *point != rebuilt {
            mismatches.push(format!("series at {s}: service {point} vs csv {rebuilt}"));
        }
    }
    compare(
        &mut mismatches,
        "series length",
        &series.len().into(),
        expected_samples.into(),
    );
    let n = expected_samples as f64;
    compare(
        &mut mismatches,
        "avg_cpu_utilisation",
        &c["avg_cpu_utilisation"],
        (expected_samples > 0).then(|| cpu_sum / n).into(),
    );
    compare(
        &mut mismatches,
        "avg_mem_utilisation",
        &c["avg_mem_utilisation"],
        (expected_samples > 0).then(|| mem_sum / n).into(),
    );
    check!(
        mismatches.is_empty(),
        "{} mismatches, first: {}",
        mismatches.len(),
        mismatches[0]
    );
    Ok(format!(
        "{} requests, {} instances, {} nodes and {expected_samples} samples at t={now} ms re-aggregate to GET /metrics exactly",
        t.requests.len(),
        t.instances.len(),
        t.nodes.len()
    ))
}

fn compare(out: &mut Vec<String>, name: &str, got: &Value, want: Value) {
    if *got != want {
        out.push(format!("{name}: service {got} vs csv {want}"));
    }
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("determinism", determinism),
        ("placement oracle", placement),
        ("routing properties", routing),
        ("cold-start schedule", cold_start),
        ("scale up and decay", scaling),
        ("node failure", failure),
        ("cost model", cost_model),
        ("ttl overflow", ttl),
        ("battleground", battleground),
        ("csv round trip", csv_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check)
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>())));
        let took = started.elapsed();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({took:.2?}): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({took:.2?}): {why}", i + 1);
            }
        }
    }
    let _ = std::fs::remove_dir_all(
        std::env::temp_dir().join(format!("faasim-acceptance-{}", std::process::id())),
    );
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
