//! Batch mode: a JSON Lines file of requests run on its own dedicated
//! instance, which is released when the job ends.
//!
//! Input lines follow the OpenAI batch format:
//! `{"custom_id": "...", "method": "POST", "url": "/v1/chat/completions", "body": {...}}`
//! (`method` and `url` are optional; `url` defaults to chat completions).
//! Output lines are `{"custom_id": ..., "response": {"status_code": 200, "body": {...}}}` and error lines
//! `{"custom_id": ..., "error": {"code": ..., "message": ...}}`.

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use bytes::Bytes;
use fedinfer_core::{InstanceId, ModelSpec, SimTime, TaskError, TaskId, TaskSpec};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tokio::sync::mpsc;

use crate::clock::Clock;
use crate::driver::{task_error_status, DispatchError, EventReceiver, FabricHandle, TaskEvent, TaskMeta};
use crate::ids::IdGen;
use crate::openai::{parse, ChatRequest, CompletionRequest, EmbeddingRequest, Normalized, ValidationError};
use crate::router::Federation;
use crate::serving::{self, ModelCheck, Route};
use crate::telemetry::{Outcome, RequestKind, UsageRecord};

/// Content-addressed blobs, on disk or in memory.
pub struct FileStore {
    dir: Option<PathBuf>,
    mem: Mutex<HashMap<String, Bytes>>,
}

impl FileStore {
    pub fn new(dir: Option<PathBuf>) -> std::io::Result<Self> {
        if let Some(d) = &dir {
            std::fs::create_dir_all(d)?;
        }
        Ok(Self { dir, mem: Mutex::new(HashMap::new()) })
    }

    pub fn put(&self, bytes: Bytes) -> std::io::Result<String> {
        let id = format!("file-{}", &hex::encode(Sha256::digest(&bytes))[..32]);
        match &self.dir {
            Some(d) => {
                let path = d.join(&id);
                if !path.exists() {
                    let tmp = d.join(format!("{id}.tmp"));
                    std::fs::write(&tmp, &bytes)?;
                    std::fs::rename(tmp, path)?;
                }
            }
            None => {
                self.mem.lock().insert(id.clone(), bytes);
            }
        }
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Option<Bytes> {
        if id.contains(['/', '\\', '.']) {
            return None;
        }
        match &self.dir {
            Some(d) => std::fs::read(d.join(id)).ok().map(Bytes::from),
            None => self.mem.lock().get(id).cloned(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchStatus {
    Validating,
    Queued,
    InProgress,
    Completed,
    Failed,
    Cancelled,
}

impl BatchStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, BatchStatus::Completed | BatchStatus::Failed | BatchStatus::Cancelled)
    }

    fn rank(self) -> u8 {
        match self {
            BatchStatus::Validating => 0,
            BatchStatus::Queued => 1,
            BatchStatus::InProgress => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestCounts {
    pub total: u32,
    pub completed: u32,
    pub failed: u32,
}

/// What `GET /v1/batches/{id}` returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchView {
    pub id: String,
    pub object: String,
    pub model: String,
    pub endpoint: Option<String>,
    pub status: BatchStatus,
    pub input_file_id: String,
    pub output_file_id: Option<String>,
    pub error_file_id: Option<String>,
    pub request_counts: RequestCounts,
    pub created_at: f64,
    pub in_progress_at: Option<f64>,
    pub finished_at: Option<f64>,
    /// From the first request starting to the last one finishing.
    pub processing_secs: Option<f64>,
    pub instance: Option<u64>,
    pub errors: Option<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BatchError {
    #[error("{message}")]
    Invalid { message: String, lines: Vec<usize> },
    #[error("batch {0} not found")]
    NotFound(String),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error("storage: {0}")]
    Storage(String),
}

#[derive(Debug, Deserialize)]
struct InputLine {
    custom_id: String,
    #[serde(default)]
    method: Option<String>,
    #[serde(default)]
    url: Option<String>,
    body: Value,
}

struct Line {
    custom_id: String,
    route: Route,
    req: Normalized,
}

struct Job {
    id: String,
    subject: String,
    model: String,
    endpoint: Option<String>,
    instance: Option<InstanceId>,
    status: BatchStatus,
    input_file_id: String,
    output_file_id: Option<String>,
    error_file_id: Option<String>,
    counts: RequestCounts,
    created_at: SimTime,
    in_progress_at: Option<SimTime>,
    finished_at: Option<SimTime>,
    output: Vec<String>,
    errors: Vec<String>,
    open: HashMap<TaskId, Line>,
    irrecoverable: bool,
    failure: Option<String>,
}

impl Job {
    fn advance(&mut self, to: BatchStatus) {
        if !self.status.is_terminal() && to.rank() >= self.status.rank() {
            self.status = to;
        }
    }

    fn view(&self, clock: &Clock) -> BatchView {
        BatchView {
            id: self.id.clone(),
            object: "batch".into(),
            model: self.model.clone(),
            endpoint: self.endpoint.clone(),
            status: self.status,
            input_file_id: self.input_file_id.clone(),
            output_file_id: self.output_file_id.clone(),
            error_file_id: self.error_file_id.clone(),
            request_counts: self.counts,
            created_at: clock.to_unix(self.created_at),
            in_progress_at: self.in_progress_at.map(|t| clock.to_unix(t)),
            finished_at: self.finished_at.map(|t| clock.to_unix(t)),
            processing_secs: self.processing(),
            instance: self.instance.map(|i| i.0),
            errors: self.failure.clone(),
        }
    }

    fn processing(&self) -> Option<f64> {
        Some(self.finished_at?.since(self.in_progress_at?).as_secs_f64())
    }

    fn error_line(&mut self, custom_id: &str, code: &str, message: &str) {
        self.errors.push(json!({"custom_id": custom_id, "error": {"code": code, "message": message}}).to_string());
        self.counts.failed += 1;
    }
}

pub struct BatchEngine {
    files: FileStore,
    fabric: Arc<FabricHandle>,
    federation: Arc<Federation>,
    ids: Arc<IdGen>,
    clock: Clock,
    seed: u64,
    max_lines: usize,
    owners: AtomicU64,
    jobs: Mutex<HashMap<String, Arc<Mutex<Job>>>>,
}

impl BatchEngine {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        files: FileStore,
        fabric: Arc<FabricHandle>,
        federation: Arc<Federation>,
        ids: Arc<IdGen>,
        clock: Clock,
        seed: u64,
        max_lines: usize,
    ) -> Self {
        Self {
            files,
            fabric,
            federation,
            ids,
            clock,
            seed,
            max_lines,
            owners: AtomicU64::new(1),
            jobs: Mutex::new(HashMap::new()),
        }
    }

    pub fn files(&self) -> &FileStore {
        &self.files
    }

    /// Validates `input`, stores it and queues every line on a new dedicated
    /// instance of `model`. The caller has already authorized `subject`.
    pub fn submit(self: &Arc<Self>, subject: &str, model: &ModelSpec, input: Bytes) -> Result<BatchView, BatchError> {
        let lines = self.validate(model, &input)?;
        let input_file_id = self.files.put(input).map_err(|e| BatchError::Storage(e.to_string()))?;
        let now = self.clock.now();
        let id = self.ids.prefixed("batch_");
        let mut job = Job {
            id: id.clone(),
            subject: subject.to_string(),
            model: model.name.clone(),
            endpoint: None,
            instance: None,
            status: BatchStatus::Validating,
            input_file_id,
            output_file_id: None,
            error_file_id: None,
            counts: RequestCounts { total: lines.len() as u32, completed: 0, failed: 0 },
            created_at: now,
            in_progress_at: None,
            finished_at: None,
            output: Vec::new(),
            errors: Vec::new(),
            open: HashMap::new(),
            irrecoverable: false,
            failure: None,
        };
        job.advance(BatchStatus::Queued);

        let mut runnable = Vec::new();
        let mut specs = Vec::new();
        for line in lines {
            match serving::task_spec(line.route, &line.req, model) {
                Ok(spec) => {
                    let meta = TaskMeta {
                        request_id: format!("{id}:{}", line.custom_id),
                        subject: subject.to_string(),
                        kind: if line.route == Route::Embedding { RequestKind::Embedding } else { RequestKind::Batch },
                        stream: false,
                        prompt_tokens: line.req.prompt_tokens,
                        arrived: now,
                    };
                    specs.push((TaskSpec { stream: false, ..spec }, meta));
                    runnable.push(line);
                }
                Err(e) => {
                    let code = match e {
                        ModelCheck::TooManyTokens { .. } => "max_tokens_exceeded",
                        ModelCheck::Invalid(_) => "invalid_request",
                    };
                    job.error_line(&line.custom_id, code, &e.to_string());
                    self.fabric.telemetry().record(UsageRecord {
                        request_id: format!("{id}:{}", line.custom_id),
                        subject: subject.to_string(),
                        model: model.name.clone(),
                        endpoint: None,
                        kind: RequestKind::Batch,
                        stream: false,
                        prompt_tokens: line.req.prompt_tokens,
                        completion_tokens: 0,
                        arrived_us: now.as_micros(),
                        dispatched_us: None,
                        started_us: None,
                        completed_us: now.as_micros(),
                        outcome: Outcome::Error { code: 422 },
                        instance: None,
                        attempts: 0,
                        cold_start: None,
                    });
                }
            }
        }

        if specs.is_empty() {
            job.finished_at = Some(now);
            self.finish(&mut job);
            let view = job.view(&self.clock);
            self.jobs.lock().insert(id, Arc::new(Mutex::new(job)));
            return Ok(view);
        }

        let (tx, rx) = mpsc::unbounded_channel();
        let owner = self.owners.fetch_add(1, Ordering::Relaxed);
        let federation = self.federation.clone();
        let (instance, endpoint, task_ids) =
            self.fabric.submit_batch(&model.name, owner, |f| federation.choose_dedicated(f, &model.name), specs, tx)?;
        job.instance = Some(instance);
        job.endpoint = Some(endpoint);
        job.open = task_ids.into_iter().zip(runnable).collect();
        let view = job.view(&self.clock);
        let job = Arc::new(Mutex::new(job));
        self.jobs.lock().insert(id, job.clone());
        tokio::spawn(self.clone().run(job, rx));
        Ok(view)
    }

    fn validate(&self, model: &ModelSpec, input: &[u8]) -> Result<Vec<Line>, BatchError> {
        let text = std::str::from_utf8(input)
            .map_err(|_| BatchError::Invalid { message: "input is not valid UTF-8".into(), lines: vec![] })?;
        let mut lines = Vec::new();
        let mut problems: Vec<(usize, String)> = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            match parse_line(raw, &model.name) {
                Ok(line) => {
                    if let Err(ModelCheck::Invalid(e)) = serving::task_spec(line.route, &line.req, model) {
                        problems.push((n, e.message));
                    } else if !seen.insert(line.custom_id.clone()) {
                        problems.push((n, format!("duplicate custom_id {:?}", line.custom_id)));
                    } else {
                        lines.push(line);
                    }
                }
                Err(e) => problems.push((n, e.message)),
            }
        }
        if !problems.is_empty() {
            let shown: Vec<String> = problems.iter().take(20).map(|(n, m)| format!("line {n}: {m}")).collect();
            let more = problems.len().saturating_sub(shown.len());
            let mut message = shown.join("; ");
            if more > 0 {
                message.push_str(&format!("; and {more} more"));
            }
            return Err(BatchError::Invalid { message, lines: problems.into_iter().map(|(n, _)| n).collect() });
        }
        if lines.is_empty() {
            return Err(BatchError::Invalid { message: "input file contains no requests".into(), lines: vec![] });
        }
        if lines.len() > self.max_lines {
            return Err(BatchError::Invalid {
                message: format!("{} requests exceed the limit of {}", lines.len(), self.max_lines),
                lines: vec![],
            });
        }
        Ok(lines)
    }

    async fn run(self: Arc<Self>, job: Arc<Mutex<Job>>, mut rx: EventReceiver) {
        while let Some((task, event)) = rx.recv().await {
            let mut j = job.lock();
            match event {
                TaskEvent::Started { at, .. } => {
                    if j.in_progress_at.is_none() {
                        j.in_progress_at = Some(at);
                    }
                    j.advance(BatchStatus::InProgress);
                }
                TaskEvent::Completed(report) => {
                    let Some(line) = j.open.remove(&task) else {
                        continue;
                    };
                    let response = self.response(&j.id, &line, report.units);
                    j.output.push(
                        json!({"custom_id": line.custom_id, "response": {"status_code": 200, "body": response}})
                            .to_string(),
                    );
                    j.counts.completed += 1;
                    j.finished_at = Some(report.finished_at);
                }
                TaskEvent::Failed { error, at } => {
                    let Some(line) = j.open.remove(&task) else {
                        continue;
                    };
                    if matches!(error, TaskError::InsufficientVram) {
                        j.irrecoverable = true;
                        j.failure.get_or_insert_with(|| error.to_string());
                    }
                    let code = match error {
                        TaskError::Cancelled => "cancelled".to_string(),
                        ref e => task_error_status(e).to_string(),
                    };
                    j.error_line(&line.custom_id, &code, &error.to_string());
                    j.finished_at = Some(at);
                }
                TaskEvent::Token { .. } | TaskEvent::Execute { .. } => {}
            }
            if j.open.is_empty() {
                self.finish(&mut j);
                if let Some(instance) = j.instance {
                    drop(j);
                    let _ = self.fabric.lock().release_instance(instance);
                }
                return;
            }
        }
    }

    fn response(&self, id: &str, line: &Line, units: u32) -> Value {
        let rid = format!("{id}-{}", line.custom_id);
        let created = self.clock.unix_now() as u64;
        match line.route {
            Route::Chat => json!(serving::chat_completion(&rid, created, &line.req, self.seed, units)),
            Route::Completion => json!(serving::text_completion(&rid, created, &line.req, self.seed, units)),
            Route::Embedding => {
                let dim =
                    self.fabric.lock().registry().model(&line.req.model).and_then(|m| m.embedding_dim).unwrap_or(1);
                json!(serving::embedding_list(&line.req, self.seed, dim))
            }
        }
    }

    fn finish(&self, j: &mut Job) {
        if j.status != BatchStatus::Cancelled {
            j.advance(if j.irrecoverable { BatchStatus::Failed } else { BatchStatus::Completed });
        }
        j.finished_at.get_or_insert_with(|| self.clock.now());
        let store = |lines: &[String]| -> Option<String> {
            if lines.is_empty() {
                return None;
            }
            let mut body = lines.join("\n");
            body.push('\n');
            self.files.put(Bytes::from(body)).ok()
        };
        j.output_file_id = store(&j.output);
        j.error_file_id = store(&j.errors);
    }

    fn job(&self, id: &str, subject: &str, admin: bool) -> Result<Arc<Mutex<Job>>, BatchError> {
        let job = self.jobs.lock().get(id).cloned().ok_or_else(|| BatchError::NotFound(id.to_string()))?;
        if !admin && job.lock().subject != subject {
            return Err(BatchError::NotFound(id.to_string()));
        }
        Ok(job)
    }

    pub fn status(&self, id: &str, subject: &str, admin: bool) -> Result<BatchView, BatchError> {
        Ok(self.job(id, subject, admin)?.lock().view(&self.clock))
    }

    /// Result lines so far (the whole file once the job has finished).
    pub fn output(&self, id: &str, subject: &str, admin: bool) -> Result<String, BatchError> {
        let job = self.job(id, subject, admin)?;
        let j = job.lock();
        Ok(j.output.iter().map(|l| format!("{l}\n")).collect())
    }

    pub fn errors(&self, id: &str, subject: &str, admin: bool) -> Result<String, BatchError> {
        let job = self.job(id, subject, admin)?;
        let j = job.lock();
        Ok(j.errors.iter().map(|l| format!("{l}\n")).collect())
    }

    pub fn list(&self, subject: &str, admin: bool) -> Vec<BatchView> {
        let jobs: Vec<Arc<Mutex<Job>>> = self.jobs.lock().values().cloned().collect();
        let mut views: Vec<BatchView> = jobs
            .iter()
            .map(|j| j.lock())
            .filter(|j| admin || j.subject == subject)
            .map(|j| j.view(&self.clock))
            .collect();
        views.sort_by(|a, b| a.id.cmp(&b.id));
        views
    }

    /// Stops the job: unfinished requests are cancelled, results so far are kept.
    pub fn cancel(&self, id: &str, subject: &str, admin: bool) -> Result<BatchView, BatchError> {
        let job = self.job(id, subject, admin)?;
        let mut j = job.lock();
        if j.status.is_terminal() {
            return Ok(j.view(&self.clock));
        }
        j.status = BatchStatus::Cancelled;
        let open: Vec<TaskId> = j.open.keys().copied().collect();
        let instance = j.instance;
        let view = j.view(&self.clock);
        drop(j);
        let mut fabric = self.fabric.lock();
        for t in open {
            let _ = fabric.cancel(t);
        }
        if let Some(i) = instance {
            let _ = fabric.release_instance(i);
        }
        Ok(view)
    }
}

fn parse_line(raw: &str, model: &str) -> Result<Line, ValidationError> {
    let bad = |m: String| ValidationError { message: m, param: None };
    let line: InputLine = serde_json::from_str(raw).map_err(|e| bad(format!("invalid JSON: {e}")))?;
    if line.custom_id.is_empty() {
        return Err(bad("custom_id must not be empty".into()));
    }
    if let Some(m) = &line.method {
        if !m.eq_ignore_ascii_case("POST") {
            return Err(bad(format!("unsupported method {m}")));
        }
    }
    let url = line.url.as_deref().unwrap_or(Route::Chat.path());
    let route = Route::from_path(url).ok_or_else(|| bad(format!("unsupported url {url}")))?;
    let mut body = line.body;
    match body.get("model").and_then(Value::as_str) {
        Some(m) if m != model => return Err(bad(format!("line model {m} differs from batch model {model}"))),
        Some(_) => {}
        None => {
            if let Some(obj) = body.as_object_mut() {
                obj.insert("model".into(), Value::String(model.to_string()));
            }
        }
    }
    let bytes = serde_json::to_vec(&body).expect("value serializes");
    let req = match route {
        Route::Chat => parse::<ChatRequest>(&bytes)?.normalize()?,
        Route::Completion => parse::<CompletionRequest>(&bytes)?.normalize()?,
        Route::Embedding => parse::<EmbeddingRequest>(&bytes)?.normalize()?,
    };
    if req.stream {
        return Err(bad("streaming is not available in batch mode".into()));
    }
    Ok(Line { custom_id: line.custom_id, route, req })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_store_is_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::new(Some(dir.path().to_path_buf())).unwrap();
        let a = store.put(Bytes::from_static(b"abc")).unwrap();
        let b = store.put(Bytes::from_static(b"abc")).unwrap();
        assert_eq!(a, b);
        assert_eq!(store.get(&a).unwrap(), Bytes::from_static(b"abc"));
        assert!(store.get("../etc/passwd").is_none());
        let mem = FileStore::new(None).unwrap();
        let c = mem.put(Bytes::from_static(b"abc")).unwrap();
        assert_eq!(c, a);
        assert!(mem.get(&c).is_some());
    }

    #[test]
    fn line_parsing() {
        let ok = parse_line(r#"{"custom_id":"a","body":{"messages":[{"role":"user","content":"hi"}]}}"#, "m").unwrap();
        assert_eq!(ok.route, Route::Chat);
        let c =
            parse_line(r#"{"custom_id":"b","url":"/v1/completions","body":{"model":"m","prompt":"x"}}"#, "m").unwrap();
        assert_eq!(c.route, Route::Completion);
        assert!(parse_line(r#"{"custom_id":"c","body":{"model":"other","prompt":"x"}}"#, "m").is_err());
        assert!(parse_line(r#"{"custom_id":"","body":{}}"#, "m").is_err());
        assert!(parse_line(r#"{"custom_id":"d","url":"/v1/images","body":{}}"#, "m").is_err());
        assert!(parse_line(r#"{"custom_id":"e","method":"GET","body":{}}"#, "m").is_err());
        assert!(parse_line("{oops", "m").is_err());
    }

    #[test]
    fn status_only_moves_forward() {
        let mut j = Job {
            id: "b".into(),
            subject: "s".into(),
            model: "m".into(),
            endpoint: None,
            instance: None,
            status: BatchStatus::Validating,
            input_file_id: "f".into(),
            output_file_id: None,
            error_file_id: None,
            counts: RequestCounts { total: 1, completed: 0, failed: 0 },
            created_at: SimTime::ZERO,
            in_progress_at: None,
            finished_at: None,
            output: vec![],
            errors: vec![],
            open: HashMap::new(),
            irrecoverable: false,
            failure: None,
        };
        j.advance(BatchStatus::InProgress);
        j.advance(BatchStatus::Queued);
        assert_eq!(j.status, BatchStatus::InProgress);
        j.advance(BatchStatus::Completed);
        j.advance(BatchStatus::Failed);
        assert_eq!(j.status, BatchStatus::Completed);
    }
}
