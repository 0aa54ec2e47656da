//! Request arrival generation.
//!
//! Arrivals are deterministic: a constant (or piecewise-constant) rate with
//! optional uniform jitter on each gap, plus one-shot bursts. All randomness
//! comes from the workload stream of the seeded RNG, so two generators built
//! from the same spec and seed yield the same sequence.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::kernel::{SimRng, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum WorkloadMode {
    #[default]
    AutoRate,
    Manual,
    Scenario,
}

/// A constant-rate stretch of a scripted workload, `[from_ms, until_ms)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatePhase {
    pub from_ms: u64,
    #[serde(default)]
    pub until_ms: Option<u64>,
    pub rate: f64,
}

/// `count` simultaneous arrivals at `at_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Burst {
    pub at_ms: u64,
    pub count: u32,
    #[serde(default)]
    pub function_type: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub mode: WorkloadMode,
    /// Requests per second in `AutoRate` mode.
    pub rate: f64,
    /// Fractional jitter applied to each inter-arrival gap.
    pub jitter: f64,
    pub scenario_name: Option<String>,
    pub function_type_mix: BTreeMap<String, f64>,
    /// Rate schedule used in `Scenario` mode.
    pub phases: Vec<RatePhase>,
    /// Honoured in every mode.
    pub bursts: Vec<Burst>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            mode: WorkloadMode::AutoRate,
            rate: 5.0,
            jitter: 0.0,
            scenario_name: None,
            function_type_mix: BTreeMap::from([("f".to_string(), 1.0)]),
            phases: Vec::new(),
            bursts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    InvalidSpec(String),
    #[error("unknown function type `{0}`")]
    UnknownFunctionType(String),
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |msg: String| Err(WorkloadError::InvalidSpec(msg));
        if !(0.0..1.0).contains(&self.jitter) {
            return bad(format!("jitter must be in [0, 1), got {}", self.jitter));
        }
        if self.mode == WorkloadMode::AutoRate && !(self.rate.is_finite() && self.rate > 0.0) {
            return bad(format!(
                "rate must be positive in AutoRate mode, got {}",
                self.rate
            ));
        }
        if self
            .function_type_mix
            .values()
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return bad("function_type_mix weights must be non-negative".into());
        }
        if self.function_type_mix.values().all(|w| *w == 0.0) {
            return bad("function_type_mix needs at least one positive weight".into());
        }
        if self.mode == WorkloadMode::Scenario {
            let mut last_end = 0;
            for phase in &self.phases {
                if !(phase.rate.is_finite() && phase.rate > 0.0) {
                    return bad(format!("phase rate must be positive, got {}", phase.rate));
                }
                if phase.from_ms < last_end {
                    return bad("phases must be sorted and non-overlapping".into());
                }
                match phase.until_ms {
                    Some(end) if end <= phase.from_ms => {
                        return bad("phase until_ms must exceed from_ms".into())
                    }
                    Some(end) => last_end = end,
                    None => last_end = u64::MAX,
                }
            }
        }
        Ok(())
    }

    /// Function types this workload can emit.
    pub fn function_types(&self) -> impl Iterator<Item = &str> {
        self.function_type_mix
            .iter()
            .filter(|(_, w)| **w > 0.0)
            .map(|(k, _)| k.as_str())
            .chain(
                self.bursts
                    .iter()
                    .filter_map(|b| b.function_type.as_deref()),
            )
    }

    fn rate_phases(&self) -> Vec<RatePhase> {
        match self.mode {
            WorkloadMode::AutoRate => vec![RatePhase {
                from_ms: 0,
                until_ms: None,
                rate: self.rate,
            }],
            WorkloadMode::Scenario => self.phases.clone(),
            WorkloadMode::Manual => Vec::new(),
        }
    }
}

/// Draws one inter-arrival gap in (fractional) milliseconds.
fn draw_gap(rate: f64, jitter: f64, rng: &mut SimRng) -> f64 {
    let base = 1000.0 / rate;
    if jitter == 0.0 {
        base
    } else {
        rng.uniform(base * (1.0 - jitter), base * (1.0 + jitter))
    }
}

/// Time of the next automatic arrival after `now`.
pub fn next_arrival(
    spec: &WorkloadSpec,
    now: SimTime,
    rng: &mut SimRng,
) -> Result<SimTime, WorkloadError> {
    if !(spec.rate.is_finite() && spec.rate > 0.0) {
        return Err(WorkloadError::InvalidSpec(format!(
            "rate must be positive, got {}",
            spec.rate
        )));
    }
    let gap = draw_gap(spec.rate, spec.jitter, rng);
    Ok(now + gap.round() as u64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arrival {
    pub time: SimTime,
    pub function_type: String,
}

/// Lazily yields the arrivals of a [`WorkloadSpec`] in time order.
#[derive(Debug, Clone)]
pub struct ArrivalGenerator {
    spec: WorkloadSpec,
    rng: SimRng,
    phases: Vec<RatePhase>,
    phase_idx: usize,
    /// Exact (unrounded) offset of the next rate-driven arrival in the
    /// current phase; rounding happens only on emission so gaps don't drift.
    offset: f64,
    next_rate: Option<SimTime>,
    /// One entry per burst arrival, sorted by time (stable).
    bursts: VecDeque<(SimTime, Option<String>)>,
}

impl ArrivalGenerator {
    pub fn new(spec: WorkloadSpec, seed: u64) -> Self {
        let mut bursts: Vec<_> = spec
            .bursts
            .iter()
            .flat_map(|b| {
                std::iter::repeat_n(
                    (SimTime(b.at_ms), b.function_type.clone()),
                    b.count as usize,
                )
            })
            .collect();
        bursts.sort_by_key(|(t, _)| *t);
        let mut gen = Self {
            phases: spec.rate_phases(),
            rng: SimRng::new(seed, SimRng::WORKLOAD_STREAM),
            spec,
            phase_idx: 0,
            offset: 0.0,
            next_rate: None,
            bursts: bursts.into(),
        };
        gen.advance_rate();
        gen
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    /// Time of the next arrival without consuming it.
    pub fn peek_time(&self) -> Option<SimTime> {
        let burst = self.bursts.front().map(|(t, _)| *t);
        match (burst, self.next_rate) {
            (Some(b), Some(r)) => Some(b.min(r)),
            (b, r) => b.or(r),
        }
    }

    fn advance_rate(&mut self) {
        self.next_rate = None;
        while let Some(phase) = self.phases.get(self.phase_idx) {
            self.offset += draw_gap(phase.rate, self.spec.jitter, &mut self.rng);
            let t = phase.from_ms + self.offset.round() as u64;
            if phase.until_ms.is_none_or(|end| t < end) {
                self.next_rate = Some(SimTime(t));
                return;
            }
            self.phase_idx += 1;
            self.offset = 0.0;
        }
    }

    fn pick_type(&mut self) -> String {
        let live: Vec<(&String, f64)> = self
            .spec
            .function_type_mix
            .iter()
            .filter(|(_, w)| **w > 0.0)
            .map(|(k, w)| (k, *w))
            .collect();
        if live.len() == 1 {
            return live[0].0.clone();
        }
        let total: f64 = live.iter().map(|(_, w)| w).sum();
        let mut x = self.rng.uniform(0.0, total);
        for (name, w) in &live {
            if x < *w {
                return (*name).clone();
            }
            x -= w;
        }
        live[live.len() - 1].0.clone()
    }
}

impl Iterator for ArrivalGenerator {
    type Item = Arrival;

    fn next(&mut self) -> Option<Arrival> {
        let burst_first = match (self.bursts.front(), self.next_rate) {
            (Some((b, _)), Some(r)) => *b <= r,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if burst_first {
            let (time, ty) = self.bursts.pop_front()?;
            let function_type = match ty {
                Some(ty) => ty,
                None => self.pick_type(),
            };
            return Some(Arrival {
                time,
                function_type,
            });
        }
        let time = self.next_rate?;
        let function_type = self.pick_type();
        self.advance_rate();
        Some(Arrival {
            time,
            function_type,
        })
    }
}
