//! Deterministic discrete-event kernel.
//!
//! The kernel owns the virtual clock, the future-event set and the append-only
//! event log. Events are processed in `(time, id)` order; ids are handed out
//! in insertion order, so simultaneous events fire in the order they were
//! scheduled. Cancellation is by tombstone: a cancelled event stays in the heap
//! and is skipped when popped.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::io::{self, Write};
use std::ops::Add;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::ids::{InstanceId, NodeId, RequestId};

/// Simulated time in integer milliseconds since the start of the run.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn millis(self) -> u64 {
        self.0
    }

    /// Milliseconds elapsed since `earlier`; zero if `earlier` is later.
    pub fn since(self, earlier: SimTime) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl Add<u64> for SimTime {
    type Output = SimTime;

    fn add(self, ms: u64) -> SimTime {
        SimTime(self.0 + ms)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EventId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    RequestArrival,
    ColdStartComplete,
    ExecutionComplete,
    TtlExpiry,
    ExecutionTimeout,
    InactivityCheck,
    NodeProvisioned,
    NodeFailed,
    /// A control command applied between events. Never scheduled, only logged.
    Command,
}

/// The entity an event is about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Subject {
    None,
    Request(RequestId),
    Instance(InstanceId),
    Node(NodeId),
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::None => f.write_str("-"),
            Subject::Request(id) => id.fmt(f),
            Subject::Instance(id) => id.fmt(f),
            Subject::Node(id) => id.fmt(f),
        }
    }
}

impl Serialize for Subject {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Subject::None => serializer.serialize_none(),
            other => serializer.collect_str(other),
        }
    }
}

impl<'de> Deserialize<'de> for Subject {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw: Option<String> = Option::deserialize(deserializer)?;
        let Some(raw) = raw else {
            return Ok(Subject::None);
        };
        let bad = || serde::de::Error::custom(format!("malformed subject `{raw}`"));
        let (prefix, digits) = raw.split_at(1.min(raw.len()));
        let n: u64 = digits.parse().map_err(|_| bad())?;
        match prefix {
            "R" => Ok(Subject::Request(RequestId(n))),
            "I" => Ok(Subject::Instance(InstanceId(n))),
            "N" => Ok(Subject::Node(NodeId(n))),
            _ => Err(bad()),
        }
    }
}

/// A scheduled event as handed to the handler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimEvent {
    pub id: EventId,
    pub time: SimTime,
    pub kind: EventKind,
    pub subject: Subject,
}

/// One entry of the append-only event log.
///
/// `seq` is the position in the log and is gapless; `id` is the scheduling id,
/// which is unique but not monotone in processing order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub id: EventId,
    pub time: SimTime,
    pub kind: EventKind,
    pub subject: Subject,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KernelError {
    #[error("cannot schedule at {requested} while the clock is at {now}")]
    SchedulingInPast { requested: SimTime, now: SimTime },
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    kind: EventKind,
    subject: Subject,
}

#[derive(Debug, Default)]
pub struct Kernel {
    clock: SimTime,
    next_id: u64,
    heap: BinaryHeap<Reverse<(SimTime, EventId)>>,
    pending: HashMap<EventId, Pending>,
    log: Vec<LogRecord>,
}

impl Kernel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    pub fn schedule(
        &mut self,
        time: SimTime,
        kind: EventKind,
        subject: Subject,
    ) -> Result<EventId, KernelError> {
        if time < self.clock {
            return Err(KernelError::SchedulingInPast {
                requested: time,
                now: self.clock,
            });
        }
        let id = self.allocate_id();
        self.heap.push(Reverse((time, id)));
        self.pending.insert(id, Pending { kind, subject });
        Ok(id)
    }

    /// Tombstones a pending event. Returns false if it already fired or was
    /// cancelled before.
    pub fn cancel(&mut self, id: EventId) -> bool {
        self.pending.remove(&id).is_some()
    }

    pub fn is_pending(&self, id: EventId) -> bool {
        self.pending.contains_key(&id)
    }

    /// Number of live (non-cancelled) events in the future set.
    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    /// Time of the next live event, discarding tombstones at the top.
    pub fn peek_time(&mut self) -> Option<SimTime> {
        while let Some(Reverse((time, id))) = self.heap.peek().copied() {
            if self.pending.contains_key(&id) {
                return Some(time);
            }
            self.heap.pop();
        }
        None
    }

    /// Pops the minimal `(time, id)` live event, advances the clock and
    /// appends it to the log.
    pub fn pop(&mut self) -> Option<SimEvent> {
        while let Some(Reverse((time, id))) = self.heap.pop() {
            let Some(p) = self.pending.remove(&id) else {
                continue;
            };
            debug_assert!(time >= self.clock);
            self.clock = time;
            self.append(id, p.kind, p.subject, None);
            return Some(SimEvent {
                id,
                time,
                kind: p.kind,
                subject: p.subject,
            });
        }
        None
    }

    /// Pops the next event and hands it to `handler`, which may schedule or
    /// cancel further events.
    pub fn step_with<F>(&mut self, mut handler: F) -> Option<SimEvent>
    where
        F: FnMut(&mut Kernel, &SimEvent),
    {
        let event = self.pop()?;
        handler(self, &event);
        Some(event)
    }

    /// Processes every event with `time <= until`, then parks the clock at
    /// `until` (or leaves it where it is if already later).
    pub fn run_until_with<F>(&mut self, until: SimTime, mut handler: F) -> usize
    where
        F: FnMut(&mut Kernel, &SimEvent),
    {
        let mut processed = 0;
        while self.peek_time().is_some_and(|t| t <= until) {
            self.step_with(&mut handler);
            processed += 1;
        }
        self.advance_to(until);
        processed
    }

    /// Moves the clock forward without processing anything. Never moves it back.
    pub fn advance_to(&mut self, time: SimTime) {
        if time > self.clock {
            self.clock = time;
        }
    }

    /// Logs an out-of-band record (control command) at the current clock.
    pub fn record(&mut self, kind: EventKind, subject: Subject, detail: Option<String>) -> EventId {
        let id = self.allocate_id();
        self.append(id, kind, subject, detail);
        id
    }

    /// Attaches `detail` to the most recent log record.
    pub fn annotate_last(&mut self, detail: String) {
        if let Some(last) = self.log.last_mut() {
            last.detail = Some(detail);
        }
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn write_ndjson<W: Write>(&self, mut out: W) -> io::Result<()> {
        for record in &self.log {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    fn allocate_id(&mut self) -> EventId {
        self.next_id += 1;
        EventId(self.next_id)
    }

    fn append(&mut self, id: EventId, kind: EventKind, subject: Subject, detail: Option<String>) {
        let seq = self.log.len() as u64;
        self.log.push(LogRecord {
            seq,
            id,
            time: self.clock,
            kind,
            subject,
            detail,
        });
    }
}

/// Seeded random stream. ChaCha8 keeps draws identical across platforms;
/// independent streams of one seed are selected with `stream`.
#[derive(Debug, Clone)]
pub struct SimRng {
    inner: ChaCha8Rng,
}

impl SimRng {
    pub const EXECUTION_STREAM: u64 = 0;
    pub const WORKLOAD_STREAM: u64 = 1;

    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Uniform draw from the closed interval `[lo, hi]`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        self.inner.random_range(lo..=hi)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }
}
