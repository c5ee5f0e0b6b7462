//! Tiered read path for the REST gateway: a versioned backing store with a
//! write-ahead log, a staleness-limited read-through cache in front of it,
//! and the updater that folds bus traffic into the store.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::bus::{BusMessage, Clock, Payload, QueueName};
use crate::eeg::EegWindow;
use crate::events::{topics, Alert, WorkspaceEvent};

pub const DEFAULT_STALENESS_MS: u64 = 500;
pub const MAX_ALERTS: usize = 200;
pub const MAX_EEG_WINDOWS: usize = 20;
pub const MAX_REWARDS: usize = 200;

/// Keys the updater maintains.
pub mod keys {
    pub const PLAN: &str = "plan";
    pub const JOINTS: &str = "joints";
    pub const MARKERS: &str = "markers";
    pub const AFFECTIVE: &str = "affective";
    pub const ALERTS: &str = "alerts";
    pub const RAW_EEG: &str = "raw_eeg";
    pub const REWARDS: &str = "rewards";
    pub const ALL: [&str; 7] = [PLAN, JOINTS, MARKERS, AFFECTIVE, ALERTS, RAW_EEG, REWARDS];
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("no value for key `{0}`")]
    NotFound(String),
    #[error("store log: {0}")]
    Io(#[from] io::Error),
    #[error("store log line {line}: {source}")]
    Format { line: usize, source: serde_json::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreRecord {
    pub key: String,
    pub value: Value,
    pub version: u64,
    pub written_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub key: String,
    pub value: Value,
    pub version: u64,
    pub written_at_ms: u64,
}

impl CacheEntry {
    pub fn age_ms(&self, now_ms: u64) -> u64 {
        now_ms.saturating_sub(self.written_at_ms)
    }
}

struct StoreInner {
    records: BTreeMap<String, StoreRecord>,
    wal: Option<BufWriter<File>>,
}

/// In-process key-value store. Every write bumps the key's version and is
/// appended to the write-ahead log when one is attached.
pub struct Store {
    inner: Mutex<StoreInner>,
    reads: AtomicU64,
    clock: Clock,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("reads", &self.reads()).finish_non_exhaustive()
    }
}

impl Store {
    pub fn new(clock: Clock) -> Self {
        Store { inner: Mutex::new(StoreInner { records: BTreeMap::new(), wal: None }), reads: AtomicU64::new(0), clock }
    }

    /// Opens or creates a log-backed store, replaying existing records.
    pub fn open(path: impl AsRef<Path>, clock: Clock) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let mut records = BTreeMap::new();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: StoreRecord =
                    serde_json::from_str(&line).map_err(|source| GatewayError::Format { line: i + 1, source })?;
                records.insert(r.key.clone(), r);
            }
        }
        let wal = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
        Ok(Store { inner: Mutex::new(StoreInner { records, wal: Some(wal) }), reads: AtomicU64::new(0), clock })
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn put(&self, key: &str, value: Value) -> Result<u64, GatewayError> {
        let now = self.clock.now_ms();
        let mut st = self.inner.lock();
        let version = st.records.get(key).map_or(1, |r| r.version + 1);
        let record = StoreRecord { key: key.to_string(), value, version, written_at_ms: now };
        if let Some(w) = st.wal.as_mut() {
            serde_json::to_writer(&mut *w, &record).map_err(io::Error::from)?;
            w.write_all(b"\n")?;
        }
        st.records.insert(key.to_string(), record);
        Ok(version)
    }

    /// Read-modify-write under the store lock.
    pub fn update(&self, key: &str, f: impl FnOnce(Option<&Value>) -> Value) -> Result<u64, GatewayError> {
        let now = self.clock.now_ms();
        let mut st = self.inner.lock();
        let (value, version) = {
            let prev = st.records.get(key);
            (f(prev.map(|r| &r.value)), prev.map_or(1, |r| r.version + 1))
        };
        let record = StoreRecord { key: key.to_string(), value, version, written_at_ms: now };
        if let Some(w) = st.wal.as_mut() {
            serde_json::to_writer(&mut *w, &record).map_err(io::Error::from)?;
            w.write_all(b"\n")?;
        }
        st.records.insert(key.to_string(), record);
        Ok(version)
    }

    /// Counted read.
    pub fn get(&self, key: &str) -> Option<StoreRecord> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.inner.lock().records.get(key).cloned()
    }

    /// Uncounted read, for inspection.
    pub fn peek(&self, key: &str) -> Option<StoreRecord> {
        self.inner.lock().records.get(key).cloned()
    }

    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn keys(&self) -> Vec<String> {
        self.inner.lock().records.keys().cloned().collect()
    }

    pub fn flush(&self) -> Result<(), GatewayError> {
        if let Some(w) = self.inner.lock().wal.as_mut() {
            w.flush()?;
        }
        Ok(())
    }
}

/// Serves a key from cache while its entry is no older than the key's
/// staleness limit; otherwise reads the store and refreshes the entry.
pub struct ReadThroughCache {
    store: Arc<Store>,
    entries: Mutex<BTreeMap<String, CacheEntry>>,
    default_limit_ms: u64,
    limits: BTreeMap<String, u64>,
}

impl ReadThroughCache {
    pub fn new(store: Arc<Store>, default_limit_ms: u64) -> Self {
        ReadThroughCache { store, entries: Mutex::new(BTreeMap::new()), default_limit_ms, limits: BTreeMap::new() }
    }

    /// Overrides the staleness limit for one key.
    pub fn with_limit(mut self, key: &str, limit_ms: u64) -> Self {
        self.limits.insert(key.to_string(), limit_ms);
        self
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn limit_for(&self, key: &str) -> u64 {
        self.limits.get(key).copied().unwrap_or(self.default_limit_ms)
    }

    pub fn get(&self, key: &str) -> Result<Value, GatewayError> {
        self.cached_get(key, self.limit_for(key))
    }

    pub fn cached_get(&self, key: &str, limit_ms: u64) -> Result<Value, GatewayError> {
        // The entry lock is held across the store read so that concurrent
        // stale reads of a key cost one store query.
        let mut entries = self.entries.lock();
        let now = self.store.clock().now_ms();
        if let Some(e) = entries.get(key) {
            if e.age_ms(now) <= limit_ms {
                return Ok(e.value.clone());
            }
        }
        let record = self.store.get(key).ok_or_else(|| GatewayError::NotFound(key.to_string()))?;
        entries.insert(
            key.to_string(),
            CacheEntry { key: key.to_string(), value: record.value.clone(), version: record.version, written_at_ms: now },
        );
        Ok(record.value)
    }

    pub fn entry(&self, key: &str) -> Option<CacheEntry> {
        self.entries.lock().get(key).cloned()
    }
}

/// Folds one bus message into the store. Returns whether it was relevant.
pub fn ingest(store: &Store, msg: &BusMessage) -> Result<bool, GatewayError> {
    match (&msg.queue, &msg.body) {
        (QueueName::Topic(t), Payload::Workspace(WorkspaceEvent::Executor(snap))) if t == topics::STATUS => {
            store.put(keys::PLAN, serde_json::to_value(&snap.status).expect("serializable"))?;
            store.put(
                keys::JOINTS,
                json!({ "timestamp_ms": snap.timestamp_ms, "pose": snap.pose, "influence": snap.influence }),
            )?;
            store.put(
                keys::MARKERS,
                json!({
                    "timestamp_ms": snap.timestamp_ms,
                    "annotations": snap.annotations,
                    "blocks": snap.block_positions,
                    "world": snap.world,
                }),
            )?;
        }
        (QueueName::Topic(t), Payload::Workspace(WorkspaceEvent::Alert(a))) if t == topics::ALERTS => {
            store.update(keys::ALERTS, |prev| push_bounded(prev, serde_json::to_value(a).expect("serializable"), MAX_ALERTS))?;
        }
        (QueueName::RawAffective, Payload::Affective(s)) => {
            store.put(keys::AFFECTIVE, serde_json::to_value(s).expect("serializable"))?;
        }
        (QueueName::Reward, Payload::Reward(r)) => {
            store.update(keys::REWARDS, |prev| push_bounded(prev, serde_json::to_value(r).expect("serializable"), MAX_REWARDS))?;
        }
        (QueueName::Eeg, Payload::Eeg(w)) => {
            store.update(keys::RAW_EEG, |prev| {
                push_bounded(prev, serde_json::to_value(w).expect("serializable"), MAX_EEG_WINDOWS)
            })?;
        }
        _ => return Ok(false),
    }
    Ok(true)
}

fn push_bounded(prev: Option<&Value>, item: Value, cap: usize) -> Value {
    let mut list: VecDeque<Value> = match prev {
        Some(Value::Array(a)) => a.iter().cloned().collect(),
        _ => VecDeque::new(),
    };
    list.push_back(item);
    while list.len() > cap {
        list.pop_front();
    }
    Value::Array(list.into())
}

/// Alerts at or after `since_ms`.
pub fn alerts_since(value: &Value, since_ms: u64) -> Vec<Alert> {
    let all: Vec<Alert> = serde_json::from_value(value.clone()).unwrap_or_default();
    all.into_iter().filter(|a| a.timestamp_ms >= since_ms).collect()
}

/// The newest `n` EEG windows.
pub fn latest_windows(value: &Value, n: usize) -> Vec<EegWindow> {
    let all: Vec<EegWindow> = serde_json::from_value(value.clone()).unwrap_or_default();
    let skip = all.len().saturating_sub(n);
    all.into_iter().skip(skip).collect()
}

/// Rebuilds the dashboard view a run ended with from its event log.
pub fn replay_into(store: &Store, log: &[BusMessage]) -> Result<usize, GatewayError> {
    let mut n = 0;
    for msg in log {
        store.clock().set_ms(msg.timestamp_ms);
        n += ingest(store, msg)? as usize;
    }
    Ok(n)
}

/// Request and stream bodies of the HTTP gateway.
pub mod wire {
    use serde::{Deserialize, Serialize};
    use serde_json::Value;

    use crate::affect::Metric;
    use crate::scenario::ControlCommand;
    use crate::world::Block;

    pub const API_PREFIX: &str = "/api/v1";

    #[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct ControlRequest {
        pub command: ControlCommand,
    }

    #[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct BlockRequest {
        pub block: Block,
    }

    #[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct OverrideRequest {
        pub metric: Metric,
        pub value: f64,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ErrorBody {
        pub error: String,
    }

    /// One line of the push stream: the current value of a store key.
    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct StreamEvent {
        pub topic: String,
        pub timestamp_ms: u64,
        pub data: Value,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(limit: u64) -> (Clock, Arc<Store>, ReadThroughCache) {
        let clock = Clock::manual();
        let store = Arc::new(Store::new(clock.clone()));
        let cache = ReadThroughCache::new(store.clone(), limit);
        (clock, store, cache)
    }

    #[test]
    fn fresh_read_skips_store() {
        let (clock, store, cache) = setup(500);
        store.put("k", json!(1)).unwrap();
        assert_eq!(cache.get("k").unwrap(), json!(1));
        let reads = store.reads();
        clock.set_ms(400);
        assert_eq!(cache.get("k").unwrap(), json!(1));
        assert_eq!(store.reads(), reads);
    }

    #[test]
    fn stale_read_refreshes_once() {
        let (clock, store, cache) = setup(500);
        store.put("k", json!("v1")).unwrap();
        cache.get("k").unwrap();
        store.put("k", json!("v2")).unwrap();
        clock.set_ms(501);
        let before = store.reads();
        assert_eq!(cache.get("k").unwrap(), json!("v2"));
        assert_eq!(cache.get("k").unwrap(), json!("v2"));
        assert_eq!(store.reads(), before + 1);
        assert_eq!(cache.entry("k").unwrap().written_at_ms, 501);
    }

    #[test]
    fn missing_key_not_found() {
        let (_, _, cache) = setup(500);
        assert!(matches!(cache.get("nope"), Err(GatewayError::NotFound(k)) if k == "nope"));
    }

    #[test]
    fn versions_increase_per_key() {
        let (_, store, _) = setup(500);
        assert_eq!(store.put("a", json!(0)).unwrap(), 1);
        assert_eq!(store.put("a", json!(0)).unwrap(), 2);
        assert_eq!(store.put("b", json!(0)).unwrap(), 1);
    }

    #[test]
    fn per_key_limit() {
        let (clock, store, _) = setup(500);
        let cache = ReadThroughCache::new(store.clone(), 500).with_limit("fast", 0);
        store.put("fast", json!(1)).unwrap();
        cache.get("fast").unwrap();
        clock.set_ms(1);
        let before = store.reads();
        cache.get("fast").unwrap();
        assert_eq!(store.reads(), before + 1);
    }

    #[test]
    fn wal_reopen_restores_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        {
            let s = Store::open(&path, Clock::manual()).unwrap();
            s.put("x", json!({"a": 1})).unwrap();
            s.put("x", json!({"a": 2})).unwrap();
            s.flush().unwrap();
        }
        let s = Store::open(&path, Clock::manual()).unwrap();
        let r = s.peek("x").unwrap();
        assert_eq!(r.version, 2);
        assert_eq!(r.value, json!({"a": 2}));
        assert_eq!(s.put("x", json!(null)).unwrap(), 3);
    }

    #[test]
    fn alerts_are_bounded_and_filtered() {
        let mut v = None;
        for t in 0..(MAX_ALERTS as u64 + 10) {
            let a = Alert { kind: crate::events::AlertKind::P300, timestamp_ms: t, detail: String::new(), score: 0.0 };
            v = Some(push_bounded(v.as_ref(), serde_json::to_value(a).unwrap(), MAX_ALERTS));
        }
        let v = v.unwrap();
        assert_eq!(v.as_array().unwrap().len(), MAX_ALERTS);
        assert_eq!(alerts_since(&v, 205).len(), 5);
    }
}
