//! Usage log and metrics.
//!
//! Every request that reaches a model ends as one [`UsageRecord`]. Records go
//! to an in-memory index right away (so totals and snapshots are exact) and to
//! an append-only JSON Lines file through a bounded channel drained by one
//! writer task, which flushes and syncs on a fixed interval. When the channel
//! is full the record is kept in memory only and counted as dropped.
//!
//! Log schema, one JSON object per line:
//!
//! | field | meaning |
//! |---|---|
//! | `request_id` | gateway request id (or `batch_id:custom_id` for batch lines) |
//! | `subject` | principal subject |
//! | `model`, `endpoint` | model name and serving endpoint (`null` if never dispatched) |
//! | `kind` | `chat`, `completion`, `embedding` or `batch` |
//! | `stream` | request asked for a stream |
//! | `prompt_tokens`, `completion_tokens` | token counts; `completion_tokens` is 0 for errors |
//! | `arrived_us`, `dispatched_us`, `started_us`, `completed_us` | clock microseconds |
//! | `outcome` | `"ok"` or `{"error": {"code": <http status>}}` |
//! | `instance`, `attempts` | serving instance and attempts used |
//! | `cold_start` | `{queue_wait_us, allocation_us, load_us}` when the request waited on a cold start |

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use fedinfer_core::fabric::ColdStart;
use fedinfer_core::stats::{rate, LatencyQuantiles};
use fedinfer_core::SimTime;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestKind {
    Chat,
    Completion,
    Embedding,
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Ok,
    Error { code: u16 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColdStartRecord {
    pub queue_wait_us: u64,
    pub allocation_us: u64,
    pub load_us: u64,
}

impl From<ColdStart> for ColdStartRecord {
    fn from(c: ColdStart) -> Self {
        Self {
            queue_wait_us: c.queue_wait.as_micros(),
            allocation_us: c.allocation.as_micros(),
            load_us: c.load.as_micros(),
        }
    }
}

impl ColdStartRecord {
    pub fn total_us(&self) -> u64 {
        self.queue_wait_us + self.allocation_us + self.load_us
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub request_id: String,
    pub subject: String,
    pub model: String,
    pub endpoint: Option<String>,
    pub kind: RequestKind,
    pub stream: bool,
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
    pub arrived_us: u64,
    pub dispatched_us: Option<u64>,
    pub started_us: Option<u64>,
    pub completed_us: u64,
    pub outcome: Outcome,
    pub instance: Option<u64>,
    pub attempts: u32,
    pub cold_start: Option<ColdStartRecord>,
}

impl UsageRecord {
    pub fn is_ok(&self) -> bool {
        self.outcome == Outcome::Ok
    }

    pub fn latency_secs(&self) -> f64 {
        self.completed_us.saturating_sub(self.arrived_us) as f64 / 1e6
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub requests: u64,
    pub ok: u64,
    pub errors: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Totals {
    fn add(&mut self, r: &UsageRecord) {
        self.requests += 1;
        if r.is_ok() {
            self.ok += 1;
        } else {
            self.errors += 1;
        }
        self.prompt_tokens += u64::from(r.prompt_tokens);
        self.completion_tokens += u64::from(r.completion_tokens);
    }
}

/// Throughput and latency over completed requests in a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub window_secs: f64,
    pub from_us: u64,
    pub to_us: u64,
    pub completed: u64,
    pub errors: u64,
    pub request_throughput: f64,
    pub output_token_throughput: f64,
    /// End-to-end latency quantiles in seconds.
    pub latency: LatencyQuantiles,
}

#[derive(Debug, thiserror::Error)]
pub enum TelemetryError {
    #[error("telemetry log {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

enum Command {
    Record(Box<UsageRecord>),
    Flush(oneshot::Sender<()>),
}

#[derive(Default)]
struct Index {
    records: Vec<UsageRecord>,
    totals: Totals,
}

pub struct TelemetryStore {
    index: Mutex<Index>,
    tx: Mutex<Option<mpsc::Sender<Command>>>,
    writer: Mutex<Option<JoinHandle<()>>>,
    dropped: Arc<AtomicU64>,
    recovered: usize,
}

impl TelemetryStore {
    /// A store that keeps records in memory only.
    pub fn in_memory() -> Self {
        Self {
            index: Mutex::new(Index::default()),
            tx: Mutex::new(None),
            writer: Mutex::new(None),
            dropped: Arc::new(AtomicU64::new(0)),
            recovered: 0,
        }
    }

    /// Opens (or creates) the log at `path`, loading the records already in
    /// it, and starts the writer task. A torn last line is ignored.
    pub fn open(path: &Path, flush_interval: Duration, capacity: usize) -> Result<Self, TelemetryError> {
        let io = |source| TelemetryError::Io { path: path.to_path_buf(), source };
        let mut index = Index::default();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            for line in reader.lines() {
                let line = line.map_err(io)?;
                if let Ok(r) = serde_json::from_str::<UsageRecord>(&line) {
                    index.totals.add(&r);
                    index.records.push(r);
                }
            }
        }
        let recovered = index.records.len();
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        let (tx, rx) = mpsc::channel(capacity.max(1));
        let dropped = Arc::new(AtomicU64::new(0));
        let writer = tokio::spawn(write_loop(rx, file, flush_interval, dropped.clone()));
        Ok(Self {
            index: Mutex::new(index),
            tx: Mutex::new(Some(tx)),
            writer: Mutex::new(Some(writer)),
            dropped,
            recovered,
        })
    }

    /// Records loaded from disk at open.
    pub fn recovered(&self) -> usize {
        self.recovered
    }

    pub fn record(&self, record: UsageRecord) {
        if let Some(tx) = self.tx.lock().as_ref() {
            if tx.try_send(Command::Record(Box::new(record.clone()))).is_err() {
                self.dropped.fetch_add(1, Ordering::Relaxed);
            }
        }
        let mut index = self.index.lock();
        index.totals.add(&record);
        index.records.push(record);
    }

    /// Records that did not make it to the log.
    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    pub fn totals(&self) -> Totals {
        self.index.lock().totals
    }

    pub fn len(&self) -> usize {
        self.index.lock().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<UsageRecord> {
        self.index.lock().records.clone()
    }

    pub fn find(&self, request_id: &str) -> Option<UsageRecord> {
        self.index.lock().records.iter().rev().find(|r| r.request_id == request_id).cloned()
    }

    /// The last `window_secs` before `now`.
    pub fn snapshot(&self, now: SimTime, window_secs: f64) -> MetricsSnapshot {
        let window = (window_secs.max(0.0) * 1e6) as u64;
        self.snapshot_between(SimTime(now.as_micros().saturating_sub(window)), now)
    }

    /// Requests completed in `[from, to]`. Only successful requests count
    /// towards throughput and latency.
    pub fn snapshot_between(&self, from: SimTime, to: SimTime) -> MetricsSnapshot {
        let (from_us, to_us) = (from.as_micros(), to.as_micros());
        let index = self.index.lock();
        let mut latencies = Vec::new();
        let (mut completed, mut errors, mut tokens) = (0u64, 0u64, 0u64);
        for r in index.records.iter().filter(|r| (from_us..=to_us).contains(&r.completed_us)) {
            if r.is_ok() {
                completed += 1;
                tokens += u64::from(r.completion_tokens);
                latencies.push(r.latency_secs());
            } else {
                errors += 1;
            }
        }
        drop(index);
        let window_secs = (to_us.saturating_sub(from_us)) as f64 / 1e6;
        MetricsSnapshot {
            window_secs,
            from_us,
            to_us,
            completed,
            errors,
            request_throughput: rate(completed as f64, window_secs),
            output_token_throughput: rate(tokens as f64, window_secs),
            latency: LatencyQuantiles::from_samples(&latencies),
        }
    }

    /// Waits until everything recorded so far is written and synced.
    pub async fn flush(&self) {
        let tx = self.tx.lock().clone();
        if let Some(tx) = tx {
            let (done, wait) = oneshot::channel();
            if tx.send(Command::Flush(done)).await.is_ok() {
                let _ = wait.await;
            }
        }
    }

    /// Flushes and stops the writer.
    pub async fn close(&self) {
        self.tx.lock().take();
        let writer = self.writer.lock().take();
        if let Some(w) = writer {
            let _ = w.await;
        }
    }
}

async fn write_loop(mut rx: mpsc::Receiver<Command>, file: File, every: Duration, dropped: Arc<AtomicU64>) {
    let mut out = BufWriter::new(file);
    let mut tick = tokio::time::interval(every.max(Duration::from_millis(1)));
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let mut dirty = false;
    loop {
        tokio::select! {
            cmd = rx.recv() => match cmd {
                Some(Command::Record(r)) => {
                    let ok = serde_json::to_writer(&mut out, &r).is_ok() && out.write_all(b"\n").is_ok();
                    if !ok {
                        dropped.fetch_add(1, Ordering::Relaxed);
                    }
                    dirty = true;
                }
                Some(Command::Flush(done)) => {
                    sync(&mut out);
                    dirty = false;
                    let _ = done.send(());
                }
                None => break,
            },
            _ = tick.tick(), if dirty => {
                sync(&mut out);
                dirty = false;
            }
        }
    }
    sync(&mut out);
}

fn sync(out: &mut BufWriter<File>) {
    if out.flush().is_ok() {
        let _ = out.get_ref().sync_data();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(i: u64, completion: u32, latency_us: u64) -> UsageRecord {
        UsageRecord {
            request_id: format!("r{i}"),
            subject: "alice".into(),
            model: "m".into(),
            endpoint: Some("e".into()),
            kind: RequestKind::Chat,
            stream: false,
            prompt_tokens: 3,
            completion_tokens: completion,
            arrived_us: i * 1_000_000,
            dispatched_us: Some(i * 1_000_000),
            started_us: Some(i * 1_000_000),
            completed_us: i * 1_000_000 + latency_us,
            outcome: Outcome::Ok,
            instance: Some(1),
            attempts: 1,
            cold_start: None,
        }
    }

    #[test]
    fn totals_accumulate() {
        let store = TelemetryStore::in_memory();
        for i in 0..100 {
            store.record(record(i, i as u32, 10));
        }
        let t = store.totals();
        assert_eq!(store.len(), 100);
        assert_eq!(t.completion_tokens, (0..100).sum::<u64>());
        assert_eq!(t.prompt_tokens, 300);
    }

    #[test]
    fn snapshot_rates_and_quantiles() {
        let store = TelemetryStore::in_memory();
        // 100 requests with latencies 1..=100 s, all completing inside [0, 200] s.
        for i in 1..=100u64 {
            let mut r = record(0, 2, i * 1_000_000);
            r.request_id = format!("q{i}");
            store.record(r);
        }
        let s = store.snapshot_between(SimTime::ZERO, SimTime::from_secs(200));
        assert_eq!(s.completed, 100);
        assert!((s.latency.p50 - 50.5).abs() < 1e-9);
        assert!((s.request_throughput - 0.5).abs() < 1e-12);
        assert!((s.output_token_throughput - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sixty_in_sixty_seconds() {
        let store = TelemetryStore::in_memory();
        for i in 0..60 {
            store.record(record(i, 1, 500_000));
        }
        let s = store.snapshot(SimTime::from_secs(60), 60.0);
        assert_eq!(s.completed, 60);
        assert!((s.request_throughput - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_window_is_zero() {
        let s = TelemetryStore::in_memory().snapshot(SimTime::from_secs(10), 60.0);
        assert_eq!(s.completed, 0);
        assert_eq!(s.request_throughput, 0.0);
        assert_eq!(s.latency, LatencyQuantiles::default());
    }

    #[test]
    fn errors_do_not_count_as_throughput() {
        let store = TelemetryStore::in_memory();
        let mut r = record(1, 0, 10);
        r.outcome = Outcome::Error { code: 502 };
        store.record(r);
        let s = store.snapshot_between(SimTime::ZERO, SimTime::from_secs(10));
        assert_eq!((s.completed, s.errors), (0, 1));
    }

    #[test]
    fn outcome_wire_format() {
        assert_eq!(serde_json::to_string(&Outcome::Ok).unwrap(), "\"ok\"");
        assert_eq!(serde_json::to_string(&Outcome::Error { code: 429 }).unwrap(), r#"{"error":{"code":429}}"#);
    }

    #[tokio::test]
    async fn flushed_records_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("usage.jsonl");
        let store = TelemetryStore::open(&path, Duration::from_secs(1), 1024).unwrap();
        for i in 0..100 {
            store.record(record(i, 5, 10));
        }
        store.flush().await;
        // Simulate a crash mid-write: a torn line after the flushed ones.
        std::fs::OpenOptions::new().append(true).open(&path).unwrap().write_all(b"{\"request_id\":\"to").unwrap();
        drop(store);
        let reopened = TelemetryStore::open(&path, Duration::from_secs(1), 1024).unwrap();
        assert_eq!(reopened.recovered(), 100);
        assert_eq!(reopened.totals().completion_tokens, 500);
        reopened.close().await;
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn concurrent_producers_write_whole_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("usage.jsonl");
        let store = Arc::new(TelemetryStore::open(&path, Duration::from_millis(5), 100_000).unwrap());
        let mut handles = Vec::new();
        for p in 0..8u64 {
            let store = store.clone();
            handles.push(tokio::spawn(async move {
                for i in 0..500 {
                    let mut r = record(i, 1, 1);
                    r.request_id = format!("p{p}-{i}");
                    r.subject = "x".repeat((i % 50) as usize);
                    store.record(r);
                }
            }));
        }
        for h in handles {
            h.await.unwrap();
        }
        store.close().await;
        let text = std::fs::read_to_string(&path).unwrap();
        let parsed: Vec<UsageRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(parsed.len(), 4000);
        assert_eq!(store.dropped(), 0);
    }

    #[tokio::test]
    async fn full_channel_goes_lossy() {
        let dir = tempfile::tempdir().unwrap();
        let store = TelemetryStore::open(&dir.path().join("u.jsonl"), Duration::from_secs(1), 1).unwrap();
        // The writer task cannot run between these synchronous calls.
        for i in 0..10 {
            store.record(record(i, 1, 1));
        }
        assert_eq!(store.dropped(), 9);
        assert_eq!(store.len(), 10);
        store.close().await;
    }
}
