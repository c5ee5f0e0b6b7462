//! In-process message broker with the four named queues, free-form dashboard
//! topics, bounded back-pressure and an append-only JSON-lines event log.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::affect::AffectiveSample;
use crate::agent::RewardSignal;
use crate::eeg::{EegWindow, RobotCommand};
use crate::events::WorkspaceEvent;

pub const DEFAULT_CAPACITY: usize = 65536;
pub const DEFAULT_GROUP: &str = "default";

#[derive(Debug, Error)]
pub enum BusError {
    #[error("queue {queue} is full ({capacity} pending messages)")]
    BackPressure { queue: QueueName, capacity: usize },
    #[error("bus closed")]
    Closed,
    #[error("event log i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed event log line {line}: {source}")]
    Format { line: usize, source: serde_json::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QueueName {
    Eeg,
    RawAffective,
    Reward,
    RobotCommand,
    Topic(String),
}

impl QueueName {
    pub const NAMED: [QueueName; 4] =
        [QueueName::Eeg, QueueName::RawAffective, QueueName::Reward, QueueName::RobotCommand];

    pub fn topic(name: impl Into<String>) -> Self {
        QueueName::Topic(name.into())
    }

    pub fn as_str(&self) -> &str {
        match self {
            QueueName::Eeg => "EEG",
            QueueName::RawAffective => "RAW_AFFECTIVE",
            QueueName::Reward => "REWARD",
            QueueName::RobotCommand => "ROBOT_COMMAND",
            QueueName::Topic(t) => t,
        }
    }
}

impl fmt::Display for QueueName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QueueName {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "EEG" => QueueName::Eeg,
            "RAW_AFFECTIVE" => QueueName::RawAffective,
            "REWARD" => QueueName::Reward,
            "ROBOT_COMMAND" => QueueName::RobotCommand,
            other => QueueName::Topic(other.to_string()),
        })
    }
}

impl Serialize for QueueName {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for QueueName {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.parse().expect("infallible"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    Affective(AffectiveSample),
    Reward(RewardSignal),
    Eeg(EegWindow),
    Command(RobotCommand),
    Workspace(WorkspaceEvent),
}

/// An enveloped message; also the event-log record format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusMessage {
    pub seq: u64,
    pub queue: QueueName,
    pub timestamp_ms: u64,
    pub body: Payload,
}

/// Time source for message timestamps.
#[derive(Debug, Clone)]
pub enum Clock {
    /// Milliseconds since the bus was created.
    Wall(Instant),
    /// Externally advanced simulated time.
    Manual(Arc<AtomicU64>),
}

impl Clock {
    pub fn wall() -> Self {
        Clock::Wall(Instant::now())
    }

    pub fn manual() -> Self {
        Clock::Manual(Arc::new(AtomicU64::new(0)))
    }

    pub fn now_ms(&self) -> u64 {
        match self {
            Clock::Wall(start) => start.elapsed().as_millis() as u64,
            Clock::Manual(t) => t.load(Ordering::SeqCst),
        }
    }

    /// Sets simulated time; ignored for wall clocks.
    pub fn set_ms(&self, ms: u64) {
        if let Clock::Manual(t) = self {
            t.store(ms, Ordering::SeqCst);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BusConfig {
    pub capacity: usize,
    /// Keep every published message in memory for `records()`.
    pub record: bool,
    pub log_path: Option<PathBuf>,
    /// Flush the log file after every message.
    pub log_sync: bool,
}

impl Default for BusConfig {
    fn default() -> Self {
        BusConfig { capacity: DEFAULT_CAPACITY, record: true, log_path: None, log_sync: false }
    }
}

#[derive(Debug, Default)]
struct QueueState {
    next_seq: u64,
    published: u64,
    dropped: u64,
    groups: BTreeMap<String, VecDeque<BusMessage>>,
}

impl QueueState {
    fn new() -> Self {
        let mut q = QueueState::default();
        q.groups.insert(DEFAULT_GROUP.to_string(), VecDeque::new());
        q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct QueueStats {
    pub published: u64,
    pub consumed: u64,
    pub pending: u64,
    pub dropped: u64,
}

struct BusState {
    queues: BTreeMap<QueueName, QueueState>,
    consumed: BTreeMap<QueueName, u64>,
    records: Vec<BusMessage>,
    writer: Option<BufWriter<File>>,
    closed: bool,
}

struct BusInner {
    state: Mutex<BusState>,
    ready: Condvar,
    clock: Clock,
    config: BusConfig,
}

/// Cheaply cloneable handle to a shared broker.
#[derive(Clone)]
pub struct Bus {
    inner: Arc<BusInner>,
}

impl fmt::Debug for Bus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Bus").field("clock", &self.inner.clock).finish_non_exhaustive()
    }
}

impl Default for Bus {
    fn default() -> Self {
        Bus::new(BusConfig::default(), Clock::wall()).expect("no log file to open")
    }
}

impl Bus {
    pub fn new(config: BusConfig, clock: Clock) -> Result<Self, BusError> {
        let writer = match &config.log_path {
            Some(p) => Some(BufWriter::new(File::create(p)?)),
            None => None,
        };
        let queues = QueueName::NAMED.iter().map(|q| (q.clone(), QueueState::new())).collect();
        Ok(Bus {
            inner: Arc::new(BusInner {
                state: Mutex::new(BusState {
                    queues,
                    consumed: BTreeMap::new(),
                    records: Vec::new(),
                    writer,
                    closed: false,
                }),
                ready: Condvar::new(),
                clock,
                config,
            }),
        })
    }

    pub fn with_clock(clock: Clock) -> Self {
        Bus::new(BusConfig::default(), clock).expect("no log file to open")
    }

    pub fn clock(&self) -> &Clock {
        &self.inner.clock
    }

    pub fn now_ms(&self) -> u64 {
        self.inner.clock.now_ms()
    }

    pub fn queue_names(&self) -> Vec<QueueName> {
        self.inner.state.lock().queues.keys().cloned().collect()
    }

    /// Registers a consumer group on `queue`. The group receives messages
    /// published from now on.
    pub fn subscribe(&self, queue: &QueueName, group: &str) {
        let mut st = self.inner.state.lock();
        st.queues
            .entry(queue.clone())
            .or_insert_with(QueueState::new)
            .groups
            .entry(group.to_string())
            .or_default();
    }

    /// Appends a message and returns its per-queue sequence number (from 1).
    pub fn publish(&self, queue: QueueName, body: Payload) -> Result<u64, BusError> {
        self.publish_inner(queue, body, false)
    }

    /// Like `publish`, but evicts the oldest pending message of any full
    /// group instead of failing. Evictions are counted as drops.
    pub fn publish_dropping_oldest(&self, queue: QueueName, body: Payload) -> Result<u64, BusError> {
        self.publish_inner(queue, body, true)
    }

    fn publish_inner(&self, queue: QueueName, body: Payload, drop_oldest: bool) -> Result<u64, BusError> {
        let capacity = self.inner.config.capacity;
        let mut guard = self.inner.state.lock();
        let st = &mut *guard;
        if st.closed {
            return Err(BusError::Closed);
        }
        let q = st.queues.entry(queue.clone()).or_insert_with(QueueState::new);
        let full = q.groups.values().any(|g| g.len() >= capacity);
        if full {
            if !drop_oldest {
                return Err(BusError::BackPressure { queue, capacity });
            }
            for g in q.groups.values_mut() {
                while g.len() >= capacity {
                    g.pop_front();
                    q.dropped += 1;
                }
            }
        }
        q.next_seq += 1;
        q.published += 1;
        let msg = BusMessage {
            seq: q.next_seq,
            queue,
            timestamp_ms: self.inner.clock.now_ms(),
            body,
        };
        for g in q.groups.values_mut() {
            g.push_back(msg.clone());
        }
        if let Some(w) = st.writer.as_mut() {
            serde_json::to_writer(&mut *w, &msg).map_err(io::Error::from)?;
            w.write_all(b"\n")?;
            if self.inner.config.log_sync {
                w.flush()?;
            }
        }
        let seq = msg.seq;
        if self.inner.config.record {
            st.records.push(msg);
        }
        drop(guard);
        self.inner.ready.notify_all();
        Ok(seq)
    }

    /// Takes the next message for the default group, waiting up to `timeout`.
    /// `Ok(None)` means the wait timed out.
    pub fn consume(&self, queue: &QueueName, timeout: Duration) -> Result<Option<BusMessage>, BusError> {
        self.consume_as(queue, DEFAULT_GROUP, timeout)
    }

    pub fn try_consume(&self, queue: &QueueName) -> Result<Option<BusMessage>, BusError> {
        self.consume_as(queue, DEFAULT_GROUP, Duration::ZERO)
    }

    pub fn consume_as(
        &self,
        queue: &QueueName,
        group: &str,
        timeout: Duration,
    ) -> Result<Option<BusMessage>, BusError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.inner.state.lock();
        loop {
            let popped = st
                .queues
                .get_mut(queue)
                .and_then(|q| q.groups.get_mut(group))
                .and_then(VecDeque::pop_front);
            if let Some(msg) = popped {
                *st.consumed.entry(queue.clone()).or_default() += 1;
                return Ok(Some(msg));
            }
            if st.closed {
                return Err(BusError::Closed);
            }
            if timeout.is_zero() || self.inner.ready.wait_until(&mut st, deadline).timed_out() {
                return Ok(None);
            }
        }
    }

    /// Drains everything currently pending for the default group.
    pub fn drain(&self, queue: &QueueName) -> Result<Vec<BusMessage>, BusError> {
        let mut out = Vec::new();
        while let Some(m) = self.try_consume(queue)? {
            out.push(m);
        }
        Ok(out)
    }

    pub fn stats(&self, queue: &QueueName) -> QueueStats {
        let st = self.inner.state.lock();
        let consumed = st.consumed.get(queue).copied().unwrap_or(0);
        st.queues
            .get(queue)
            .map(|q| QueueStats {
                published: q.published,
                consumed,
                pending: q.groups.get(DEFAULT_GROUP).map_or(0, |g| g.len() as u64),
                dropped: q.dropped,
            })
            .unwrap_or_default()
    }

    /// Copy of the in-memory event log, in append order.
    pub fn records(&self) -> Vec<BusMessage> {
        self.inner.state.lock().records.clone()
    }

    pub fn record_count(&self) -> usize {
        self.inner.state.lock().records.len()
    }

    pub fn flush(&self) -> Result<(), BusError> {
        if let Some(w) = self.inner.state.lock().writer.as_mut() {
            w.flush()?;
        }
        Ok(())
    }

    /// Closes the bus: publishers fail, consumers drain what is pending and
    /// then see `Closed`. Flushes the log file.
    pub fn close(&self) -> Result<(), BusError> {
        let mut st = self.inner.state.lock();
        st.closed = true;
        if let Some(w) = st.writer.as_mut() {
            w.flush()?;
        }
        drop(st);
        self.inner.ready.notify_all();
        Ok(())
    }

    pub fn is_closed(&self) -> bool {
        self.inner.state.lock().closed
    }
}

/// Writes records as JSON lines.
pub fn write_log<W: Write>(mut out: W, records: &[BusMessage]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<BusMessage>, BusError> {
    parse_log(BufReader::new(File::open(path)?))
}

pub fn parse_log<R: BufRead>(input: R) -> Result<Vec<BusMessage>, BusError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| BusError::Format { line: i + 1, source })?;
        out.push(rec);
    }
    Ok(out)
}

/// Records with `seq >= from_seq`, in original log order.
pub fn replay(log: &[BusMessage], from_seq: u64) -> impl Iterator<Item = &BusMessage> {
    log.iter().filter(move |m| m.seq >= from_seq)
}
