//! Load generator: fixed request counts at a set or infinite rate, reporting
//! request and token throughput, end-to-end latency and duration.

pub mod target;
pub mod workload;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use fedinfer_core::stats::quantile;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tokio::task::JoinSet;
use tokio::time::Instant;

pub use target::{HttpTarget, InProcessTarget, Reply, Target, TargetError};
pub use workload::{generate, Arrivals, Lengths, Mode, PlannedRequest, Rate, WorkloadSpec};

use crate::app::Gateway;
use crate::config::GatewayConfig;
use crate::serving::{completion_tokens_of, SseTally};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub index: usize,
    /// Seconds from the start of the run until the request was sent.
    pub sent_secs: f64,
    pub latency_secs: f64,
    /// Time to the first streamed bytes (streaming requests only).
    pub ttft_secs: Option<f64>,
    /// HTTP status; 0 when the request never got a response.
    pub status: u16,
    pub ok: bool,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub mode: Mode,
    pub rate: String,
    pub n_requests: usize,
    pub sent: usize,
    pub completed: usize,
    pub failed: usize,
    /// Stopped early because too many requests failed.
    pub aborted: bool,
    pub duration_secs: f64,
    /// Successful requests per second.
    pub request_throughput: f64,
    /// Output tokens of successful requests per second.
    pub output_token_throughput: f64,
    pub total_output_tokens: u64,
    pub median_e2e_latency: f64,
    pub mean_e2e_latency: f64,
    pub p99_e2e_latency: f64,
    pub median_ttft: Option<f64>,
    /// Failures by status (`0` for transport errors).
    pub errors: BTreeMap<u16, usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub records: Vec<RequestRecord>,
}

impl BenchReport {
    fn from_records(spec: &WorkloadSpec, records: Vec<RequestRecord>, duration_secs: f64, aborted: bool) -> Self {
        let ok: Vec<&RequestRecord> = records.iter().filter(|r| r.ok).collect();
        let latencies: Vec<f64> = ok.iter().map(|r| r.latency_secs).collect();
        let ttfts: Vec<f64> = ok.iter().filter_map(|r| r.ttft_secs).collect();
        let total_output_tokens: u64 = ok.iter().map(|r| u64::from(r.output_tokens)).sum();
        let per_sec = |x: f64| {
            if duration_secs > 0.0 {
                x / duration_secs
            } else {
                0.0
            }
        };
        let mut errors = BTreeMap::new();
        for r in records.iter().filter(|r| !r.ok) {
            *errors.entry(r.status).or_default() += 1;
        }
        let mean = if latencies.is_empty() { 0.0 } else { latencies.iter().sum::<f64>() / latencies.len() as f64 };
        Self {
            model: spec.model.clone(),
            mode: spec.mode,
            rate: spec.rate.to_string(),
            n_requests: spec.n_requests,
            sent: records.len(),
            completed: ok.len(),
            failed: records.len() - ok.len(),
            aborted,
            duration_secs,
            request_throughput: per_sec(ok.len() as f64),
            output_token_throughput: per_sec(total_output_tokens as f64),
            total_output_tokens,
            median_e2e_latency: quantile(&latencies, 0.5),
            mean_e2e_latency: mean,
            p99_e2e_latency: quantile(&latencies, 0.99),
            median_ttft: (!ttfts.is_empty()).then(|| quantile(&ttfts, 0.5)),
            errors,
            records,
        }
    }

    /// The same report without per-request records.
    pub fn summary(&self) -> Self {
        Self { records: Vec::new(), ..self.clone() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error("unexpected response {status}: {body}")]
    Status { status: u16, body: String },
    #[error("{0}")]
    Other(String),
}

impl BenchError {
    fn status(reply: &Reply) -> Self {
        BenchError::Status { status: reply.status, body: String::from_utf8_lossy(&reply.body).into_owned() }
    }
}

async fn send_one(
    target: Arc<dyn Target>,
    spec: Arc<WorkloadSpec>,
    req: PlannedRequest,
    start: Instant,
) -> RequestRecord {
    let body = Bytes::from(req.chat_body(&spec.model, spec.stream).to_string());
    let sent = Instant::now();
    let result = target.post("/v1/chat/completions", body).await;
    let latency_secs = sent.elapsed().as_secs_f64();
    let mut record = RequestRecord {
        index: req.index,
        sent_secs: sent.duration_since(start).as_secs_f64(),
        latency_secs,
        ttft_secs: None,
        status: 0,
        ok: false,
        prompt_tokens: req.prompt_tokens,
        output_tokens: 0,
        error: None,
    };
    match result {
        Err(e) => record.error = Some(e.to_string()),
        Ok(reply) => {
            record.status = reply.status;
            if !reply.is_success() {
                record.error = Some(String::from_utf8_lossy(&reply.body).into_owned());
            } else if spec.stream {
                record.ttft_secs = reply.first_byte.map(|t| t.duration_since(sent).as_secs_f64());
                let mut tally = SseTally::default();
                tally.feed(&reply.body);
                let text = String::from_utf8_lossy(&reply.body);
                if text.contains("\"error\"") || !text.contains("[DONE]") {
                    record.error = Some("stream ended with an error".into());
                } else {
                    record.ok = true;
                    record.output_tokens = tally.tokens();
                }
            } else {
                record.ok = true;
                record.output_tokens = completion_tokens_of(&reply.body).unwrap_or(0);
            }
        }
    }
    record
}

/// Runs `spec` open-loop against `target`.
pub async fn run_bench(target: Arc<dyn Target>, spec: &WorkloadSpec) -> Result<BenchReport, BenchError> {
    if spec.mode == Mode::Batch {
        return run_batch(target, spec, Duration::from_secs(1)).await;
    }
    let plan = generate(spec);
    let shared = Arc::new(spec.clone());
    let start = Instant::now();
    let permits = Arc::new(Semaphore::new(spec.concurrency.max(1)));
    let records = Arc::new(Mutex::new(Vec::with_capacity(plan.len())));
    let abort = Arc::new(AtomicBool::new(false));
    let min_samples = spec.n_requests.min(20);
    let threshold = spec.error_threshold;
    let mut tasks = JoinSet::new();

    for req in plan {
        if abort.load(Ordering::SeqCst) {
            break;
        }
        if spec.duration_cap_secs.is_some_and(|cap| req.offset_secs > cap) {
            break;
        }
        tokio::time::sleep_until(start + Duration::from_secs_f64(req.offset_secs)).await;
        let permit = permits.clone().acquire_owned().await.expect("semaphore is never closed");
        let (target, shared, records, abort) = (target.clone(), shared.clone(), records.clone(), abort.clone());
        tasks.spawn(async move {
            let record = send_one(target, shared, req, start).await;
            drop(permit);
            let mut all = records.lock();
            all.push(record);
            let failed = all.iter().filter(|r| !r.ok).count();
            if all.len() >= min_samples && failed as f64 > threshold * all.len() as f64 {
                abort.store(true, Ordering::SeqCst);
            }
        });
        while tasks.try_join_next().is_some() {}
    }
    while tasks.join_next().await.is_some() {}

    let mut records = std::mem::take(&mut *records.lock());
    records.sort_by_key(|r| r.index);
    let duration = records.iter().map(|r| r.sent_secs + r.latency_secs).fold(0.0, f64::max);
    Ok(BenchReport::from_records(spec, records, duration, abort.load(Ordering::SeqCst)))
}

/// Submits the workload as one batch job and waits for it. Duration is the
/// job's processing time, from its first request starting to its last one
/// finishing.
pub async fn run_batch(
    target: Arc<dyn Target>,
    spec: &WorkloadSpec,
    poll: Duration,
) -> Result<BenchReport, BenchError> {
    let plan = generate(spec);
    let mut body = String::new();
    for r in &plan {
        let line = serde_json::json!({
            "custom_id": format!("req-{}", r.index),
            "method": "POST",
            "url": "/v1/chat/completions",
            "body": r.chat_body(&spec.model, false),
        });
        body.push_str(&line.to_string());
        body.push('\n');
    }
    let sent = Instant::now();
    let reply = target.post(&format!("/v1/batches?model={}", spec.model), Bytes::from(body)).await?;
    if !reply.is_success() {
        return Err(BenchError::status(&reply));
    }
    let id =
        reply.json().and_then(|v| v["id"].as_str().map(str::to_string)).ok_or_else(|| BenchError::status(&reply))?;
    let view = loop {
        let reply = target.get(&format!("/v1/batches/{id}")).await?;
        let view = reply.json().ok_or_else(|| BenchError::status(&reply))?;
        if matches!(view["status"].as_str(), Some("completed" | "failed" | "cancelled")) {
            break view;
        }
        tokio::time::sleep(poll).await;
    };
    let elapsed = sent.elapsed().as_secs_f64();
    let output = target.get(&format!("/v1/batches/{id}/output")).await?;
    let mut tokens: BTreeMap<usize, u32> = BTreeMap::new();
    for line in String::from_utf8_lossy(&output.body).lines() {
        let Ok(v) = serde_json::from_str::<serde_json::Value>(line) else {
            continue;
        };
        let Some(index) = v["custom_id"].as_str().and_then(|c| c.strip_prefix("req-")).and_then(|i| i.parse().ok())
        else {
            continue;
        };
        tokens.insert(index, v["response"]["body"]["usage"]["completion_tokens"].as_u64().unwrap_or(0) as u32);
    }
    let records = plan
        .iter()
        .map(|r| RequestRecord {
            index: r.index,
            sent_secs: 0.0,
            latency_secs: elapsed,
            ttft_secs: None,
            status: if tokens.contains_key(&r.index) { 200 } else { 0 },
            ok: tokens.contains_key(&r.index),
            prompt_tokens: r.prompt_tokens,
            output_tokens: tokens.get(&r.index).copied().unwrap_or(0),
            error: None,
        })
        .collect();
    let duration = view["processing_secs"].as_f64().unwrap_or(elapsed);
    Ok(BenchReport::from_records(spec, records, duration, false))
}

fn running_instances(jobs: &serde_json::Value, model: &str) -> (u64, Option<u64>) {
    let mut running = 0;
    let mut max_parallel = None;
    for m in jobs["models"].as_array().into_iter().flatten().filter(|m| m["model"] == model) {
        running += m["instances_running"].as_u64().unwrap_or(0);
        for i in m["instances"].as_array().into_iter().flatten() {
            max_parallel = max_parallel.or(i["max_parallel"].as_u64());
        }
    }
    (running, max_parallel)
}

/// Keeps `model` busy until `instances` of it are running, so a measured
/// run does not include cold starts.
pub async fn warm_up(
    target: Arc<dyn Target>,
    model: &str,
    instances: u64,
    timeout: Duration,
) -> Result<(), BenchError> {
    let stop = Arc::new(AtomicBool::new(false));
    let deadline = Instant::now() + timeout;
    let mut workers = JoinSet::new();
    let spawn = |workers: &mut JoinSet<()>| {
        let (target, stop, model) = (target.clone(), stop.clone(), model.to_string());
        workers.spawn(async move {
            let body = serde_json::json!({
                "model": model,
                "messages": [{"role": "user", "content": "warm up"}],
                "max_tokens": 64,
            });
            let body = Bytes::from(body.to_string());
            while !stop.load(Ordering::SeqCst) {
                match target.post("/v1/chat/completions", body.clone()).await {
                    Ok(r) if r.is_success() => {}
                    _ => tokio::time::sleep(Duration::from_secs(1)).await,
                }
            }
        });
    };
    let result = loop {
        let jobs = target.get("/jobs").await?;
        let (running, max_parallel) = running_instances(&jobs.json().unwrap_or_default(), model);
        if running >= instances {
            break Ok(());
        }
        if Instant::now() >= deadline {
            break Err(BenchError::Other(format!("only {running} of {instances} instances running after warm-up")));
        }
        // Enough load to saturate every running instance plus some queued work.
        let p = max_parallel.unwrap_or(16) as usize;
        while workers.len() < (running as usize + 1) * p + 1 {
            spawn(&mut workers);
        }
        tokio::time::sleep(Duration::from_secs(5)).await;
    };
    stop.store(true, Ordering::SeqCst);
    while workers.join_next().await.is_some() {}
    result
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub instances: u32,
    pub rate: String,
    pub report: Option<BenchReport>,
    pub error: Option<String>,
}

/// One row per (instance cap, rate): a fresh in-process gateway each time,
/// with every endpoint's per-model instance cap set to the point's value.
/// With `warm`, that many instances are started before measuring.
pub async fn sweep_in_process(
    config: &GatewayConfig,
    template: &WorkloadSpec,
    rates: &[Rate],
    instances: &[u32],
    warm: bool,
) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for &k in instances {
        for &rate in rates {
            let mut cfg = config.clone();
            for e in &mut cfg.endpoints {
                e.max_instances_per_model = k;
            }
            let spec = WorkloadSpec { rate, ..template.clone() };
            let result = run_point(cfg, &spec, k, warm).await;
            rows.push(SweepRow {
                instances: k,
                rate: rate.to_string(),
                report: result.as_ref().ok().map(BenchReport::summary),
                error: result.err().map(|e| e.to_string()),
            });
        }
    }
    rows
}

async fn run_point(
    cfg: GatewayConfig,
    spec: &WorkloadSpec,
    instances: u32,
    warm: bool,
) -> Result<BenchReport, BenchError> {
    let gw = Gateway::build(cfg).map_err(|e| BenchError::Other(e.to_string()))?;
    let result = async {
        let target: Arc<dyn Target> = Arc::new(InProcessTarget::new(gw.router(), &bench_token(&gw)?));
        if warm {
            warm_up(target.clone(), &spec.model, u64::from(instances), Duration::from_secs(3600)).await?;
        }
        run_bench(target, spec).await
    }
    .await;
    gw.shutdown().await;
    result
}

/// A token for the harness from the built-in identity provider, in every
/// group that guards a model.
pub fn bench_token(gw: &Gateway) -> Result<String, BenchError> {
    let idp =
        gw.idp.as_ref().ok_or_else(|| BenchError::Other("in-process runs need the mock identity provider".into()))?;
    let mut groups: Vec<&str> = gw.config.models.iter().flat_map(|m| m.groups.iter().map(String::as_str)).collect();
    groups.push(&gw.config.admin_group);
    groups.sort();
    groups.dedup();
    Ok(idp.mint_default("bench", &groups).access_token)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    std::fs::write(path, text)
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    instances: Option<u32>,
    rate: &'a str,
    completed: usize,
    failed: usize,
    duration_s: f64,
    request_throughput: f64,
    output_token_throughput: f64,
    median_e2e_latency_s: f64,
    p99_e2e_latency_s: f64,
    error: &'a str,
}

impl<'a> CsvRow<'a> {
    fn new(instances: Option<u32>, rate: &'a str, report: Option<&BenchReport>, error: &'a str) -> Self {
        let f = |g: fn(&BenchReport) -> f64| report.map(g).unwrap_or(f64::NAN);
        Self {
            instances,
            rate,
            completed: report.map_or(0, |r| r.completed),
            failed: report.map_or(0, |r| r.failed),
            duration_s: f(|r| r.duration_secs),
            request_throughput: f(|r| r.request_throughput),
            output_token_throughput: f(|r| r.output_token_throughput),
            median_e2e_latency_s: f(|r| r.median_e2e_latency),
            p99_e2e_latency_s: f(|r| r.p99_e2e_latency),
            error,
        }
    }
}

pub fn write_csv_report(path: &Path, report: &BenchReport) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.serialize(CsvRow::new(None, &report.rate, Some(report), ""))?;
    w.flush()?;
    Ok(())
}

pub fn write_csv_sweep(path: &Path, rows: &[SweepRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(CsvRow::new(
            Some(row.instances),
            &row.rate,
            row.report.as_ref(),
            row.error.as_deref().unwrap_or(""),
        ))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_counts_only_successes() {
        let spec = WorkloadSpec::new("m", 3, Rate::Infinite, 1);
        let rec = |index, ok, latency_secs, output_tokens| RequestRecord {
            index,
            sent_secs: 0.0,
            latency_secs,
            ttft_secs: None,
            status: if ok { 200 } else { 503 },
            ok,
            prompt_tokens: 1,
            output_tokens,
            error: None,
        };
        let r = BenchReport::from_records(
            &spec,
            vec![rec(0, true, 1.0, 10), rec(1, true, 3.0, 30), rec(2, false, 0.1, 0)],
            4.0,
            false,
        );
        assert_eq!((r.completed, r.failed), (2, 1));
        assert_eq!(r.request_throughput, 0.5);
        assert_eq!(r.output_token_throughput, 10.0);
        assert_eq!(r.median_e2e_latency, 2.0);
        assert_eq!(r.errors[&503], 1);
    }
}
