//! Two isolated arenas fed one arrival schedule, for side-by-side strategy
//! comparison.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, SimConfig};
use crate::kernel::SimTime;
use crate::metrics::{join_csv_tables, Cost};
use crate::sim::{CommandOutcome, SimCommand, SimError, Simulation};
use crate::workload::{ArrivalGenerator, WorkloadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArenaLabel {
    A,
    B,
}

impl ArenaLabel {
    pub const BOTH: [ArenaLabel; 2] = [ArenaLabel::A, ArenaLabel::B];

    pub fn as_str(self) -> &'static str {
        match self {
            ArenaLabel::A => "A",
            ArenaLabel::B => "B",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ArenaLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug)]
pub struct Arena {
    pub label: ArenaLabel,
    pub sim: Simulation,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BattlegroundError {
    #[error("arena {arena}: {source}")]
    InvalidConfig {
        arena: ArenaLabel,
        source: ConfigError,
    },
    #[error("arenas must share sample_interval_ms ({a} vs {b})")]
    SampleIntervalMismatch { a: u64, b: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArenaSummary {
    pub label: ArenaLabel,
    pub routing_strategy: String,
    pub placement_strategy: String,
    pub avg_latency_ms: Option<f64>,
    pub success_rate: Option<f64>,
    /// Successful requests per simulated second.
    pub throughput_per_s: Option<f64>,
    pub total_created: u64,
    pub total_succeeded: u64,
    pub total_failed: u64,
    pub cold_starts: u64,
    pub cumulative_cost: Cost,
}

/// One sampling instant, A value first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedPoint {
    pub time_ms: u64,
    pub queue_length: [u64; 2],
    pub cpu_utilisation: [f64; 2],
    pub mem_utilisation: [f64; 2],
    pub active_instances: [u64; 2],
    pub cumulative_cost: [Cost; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub time_ms: u64,
    pub seed: u64,
    pub arenas: [ArenaSummary; 2],
    pub series: Vec<PairedPoint>,
}

pub struct Battleground {
    arenas: [Arena; 2],
    feed: ArrivalGenerator,
    seed: u64,
}

impl fmt::Debug for Battleground {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Battleground")
            .field("now", &self.now())
            .field("seed", &self.seed)
            .field("arenas", &self.arenas)
            .finish_non_exhaustive()
    }
}

impl Battleground {
    /// Builds both arenas. Arrivals come from `config_a`'s workload spec,
    /// generated once with `seed` and delivered to both.
    pub fn create(
        config_a: SimConfig,
        config_b: SimConfig,
        seed: u64,
    ) -> Result<Self, BattlegroundError> {
        let invalid = |arena, source| BattlegroundError::InvalidConfig { arena, source };
        if config_a.sample_interval_ms != config_b.sample_interval_ms {
            return Err(BattlegroundError::SampleIntervalMismatch {
                a: config_a.sample_interval_ms,
                b: config_b.sample_interval_ms,
            });
        }
        if let Some(ty) = config_a
            .workload
            .function_types()
            .find(|t| config_b.exec_base_for(t).is_none())
        {
            return Err(invalid(
                ArenaLabel::B,
                ConfigError(format!("function type `{ty}` missing from exec_base_ms")),
            ));
        }
        let feed = ArrivalGenerator::new(config_a.workload.clone(), seed);
        let a = Simulation::externally_fed(config_a).map_err(|e| invalid(ArenaLabel::A, e))?;
        let b = Simulation::externally_fed(config_b).map_err(|e| invalid(ArenaLabel::B, e))?;
        Ok(Self {
            arenas: [
                Arena {
                    label: ArenaLabel::A,
                    sim: a,
                },
                Arena {
                    label: ArenaLabel::B,
                    sim: b,
                },
            ],
            feed,
            seed,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn now(&self) -> SimTime {
        self.arenas[0].sim.now()
    }

    pub fn workload(&self) -> &WorkloadSpec {
        self.feed.spec()
    }

    pub fn arena(&self, label: ArenaLabel) -> &Arena {
        &self.arenas[label.index()]
    }

    pub fn arena_mut(&mut self, label: ArenaLabel) -> &mut Arena {
        &mut self.arenas[label.index()]
    }

    pub fn arenas(&self) -> &[Arena; 2] {
        &self.arenas
    }

    /// Advances both clocks by exactly `dt_ms`. Returns the number of events
    /// each arena processed.
    pub fn step_lockstep(&mut self, dt_ms: u64) -> (usize, usize) {
        let target = self.now() + dt_ms;
        self.advance_to(target)
    }

    /// Advances both clocks to `target` (no-op for earlier times).
    pub fn advance_to(&mut self, target: SimTime) -> (usize, usize) {
        while self.feed.peek_time().is_some_and(|t| t <= target) {
            let arrival = self.feed.next().expect("peeked");
            for arena in &mut self.arenas {
                let at = arrival.time.max(arena.sim.now());
                arena
                    .sim
                    .schedule_arrival(at, &arrival.function_type)
                    .expect("both arenas know every fed function type");
            }
        }
        let [a, b] = &mut self.arenas;
        (a.sim.run_until(target), b.sim.run_until(target))
    }

    /// Applies a command to one arena only.
    pub fn apply(
        &mut self,
        label: ArenaLabel,
        command: SimCommand,
    ) -> Result<CommandOutcome, SimError> {
        self.arena_mut(label).sim.apply(command)
    }

    /// Swaps the shared arrival schedule, continuing after the current time.
    pub fn set_workload(&mut self, spec: WorkloadSpec) -> Result<(), ConfigError> {
        spec.validate().map_err(|e| ConfigError(e.to_string()))?;
        for arena in &self.arenas {
            if let Some(ty) = spec
                .function_types()
                .find(|t| arena.sim.config().exec_base_for(t).is_none())
            {
                return Err(ConfigError(format!(
                    "arena {}: function type `{ty}` missing from exec_base_ms",
                    arena.label
                )));
            }
        }
        let now = self.now();
        let mut feed = ArrivalGenerator::new(spec, self.seed);
        while feed.peek_time().is_some_and(|t| t <= now) {
            feed.next();
        }
        self.feed = feed;
        Ok(())
    }

    pub fn report(&self) -> ComparisonReport {
        let summary = |arena: &Arena| {
            let stats = arena.sim.cumulative_stats();
            let terminal = stats.total_succeeded + stats.total_failed;
            let secs = arena.sim.now().millis() as f64 / 1000.0;
            ArenaSummary {
                label: arena.label,
                routing_strategy: arena.sim.config().routing_strategy.to_string(),
                placement_strategy: arena.sim.config().placement_strategy.to_string(),
                avg_latency_ms: stats.avg_end_to_end_ms,
                success_rate: (terminal > 0)
                    .then(|| stats.total_succeeded as f64 / terminal as f64),
                throughput_per_s: (secs > 0.0).then(|| stats.total_succeeded as f64 / secs),
                total_created: stats.total_created,
                total_succeeded: stats.total_succeeded,
                total_failed: stats.total_failed,
                cold_starts: stats.cold_starts,
                cumulative_cost: stats.cumulative_cost,
            }
        };
        let [a, b] = &self.arenas;
        let series = a
            .sim
            .series()
            .iter()
            .zip(b.sim.series())
            .map(|(x, y)| {
                debug_assert_eq!(x.time_ms, y.time_ms);
                PairedPoint {
                    time_ms: x.time_ms,
                    queue_length: [x.queue_length, y.queue_length],
                    cpu_utilisation: [x.cpu_utilisation, y.cpu_utilisation],
                    mem_utilisation: [x.mem_utilisation, y.mem_utilisation],
                    active_instances: [x.active_instances, y.active_instances],
                    cumulative_cost: [x.cumulative_cost, y.cumulative_cost],
                }
            })
            .collect();
        ComparisonReport {
            time_ms: self.now().millis(),
            seed: self.seed,
            arenas: [summary(a), summary(b)],
            series,
        }
    }

    /// Both arenas' tables, each row prefixed with its arena label.
    pub fn export_csv(&self) -> String {
        let sets: Vec<[String; 3]> = self
            .arenas
            .iter()
            .map(|a| a.sim.csv_tables(Some(a.label.as_str())))
            .collect();
        join_csv_tables(&sets)
    }
}
