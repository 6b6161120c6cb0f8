//! Runs the fabric against the process clock and delivers its outputs.
//!
//! The fabric sits behind one mutex. Callers lock it to submit or inspect;
//! every lock first advances the fabric to the current clock time. A driver
//! task sleeps until the next scheduled fabric event (or until a caller pokes
//! it), advances, and routes outputs to the per-task channels registered at
//! submit time. Results are pushed the moment the fabric produces them; nobody
//! polls.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use fedinfer_core::fabric::{FabricStats, TaskReport};
use fedinfer_core::{Fabric, FabricError, InstanceId, Output, SimTime, TaskError, TaskId, TaskSpec};
use parking_lot::{Mutex, MutexGuard};
use tokio::sync::{mpsc, Notify};
use tokio::task::JoinHandle;

use crate::clock::Clock;
use crate::telemetry::{Outcome, RequestKind, TelemetryStore, UsageRecord};

/// What a subscriber hears about its task.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskEvent {
    Started {
        instance: InstanceId,
        attempt: u32,
        at: SimTime,
    },
    Token {
        index: u32,
        at: SimTime,
    },
    /// Run this attempt on the external backend, then call
    /// [`FabricHandle::complete_external`].
    Execute {
        instance: InstanceId,
        attempt: u32,
    },
    Completed(TaskReport),
    Failed {
        error: TaskError,
        at: SimTime,
    },
}

impl TaskEvent {
    pub fn is_terminal(&self) -> bool {
        matches!(self, TaskEvent::Completed(_) | TaskEvent::Failed { .. })
    }
}

pub type EventSender = mpsc::UnboundedSender<(TaskId, TaskEvent)>;
pub type EventReceiver = mpsc::UnboundedReceiver<(TaskId, TaskEvent)>;

/// Who asked for a task, for the usage log.
#[derive(Debug, Clone)]
pub struct TaskMeta {
    pub request_id: String,
    pub subject: String,
    pub kind: RequestKind,
    pub stream: bool,
    pub prompt_tokens: u32,
    pub arrived: SimTime,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DispatchError {
    #[error("compute fabric is not running")]
    EndpointDown,
    #[error("too many pending tasks ({0})")]
    Backpressure(usize),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

/// HTTP status a failed task maps to.
pub fn task_error_status(error: &TaskError) -> u16 {
    match error {
        TaskError::UnregisteredFunction => 403,
        TaskError::Cancelled => 499,
        TaskError::External { status: Some(s), .. } => *s,
        TaskError::Failed { .. } | TaskError::InsufficientVram | TaskError::External { status: None, .. } => 502,
    }
}

struct Subscriber {
    tx: EventSender,
    meta: TaskMeta,
    model: String,
    endpoint: String,
    started: Option<SimTime>,
}

pub struct Locked {
    pub fabric: Fabric,
    subs: HashMap<TaskId, Subscriber>,
}

pub struct FabricHandle {
    state: Mutex<Locked>,
    clock: Clock,
    telemetry: Arc<TelemetryStore>,
    notify: Arc<Notify>,
    stopped: AtomicBool,
    max_pending: usize,
    peak_open: AtomicUsize,
    driver: Mutex<Option<JoinHandle<()>>>,
}

/// A locked fabric, already advanced to the current time. Outputs produced
/// while it is held are routed when it is dropped.
pub struct FabricGuard<'a> {
    handle: &'a FabricHandle,
    guard: MutexGuard<'a, Locked>,
}

impl std::ops::Deref for FabricGuard<'_> {
    type Target = Fabric;
    fn deref(&self) -> &Fabric {
        &self.guard.fabric
    }
}

impl std::ops::DerefMut for FabricGuard<'_> {
    fn deref_mut(&mut self) -> &mut Fabric {
        &mut self.guard.fabric
    }
}

impl Drop for FabricGuard<'_> {
    fn drop(&mut self) {
        self.handle.route(&mut self.guard);
        self.handle.notify.notify_one();
    }
}

impl FabricHandle {
    /// Wraps `fabric` and starts the driver task. Must run inside a tokio runtime.
    pub fn start(fabric: Fabric, clock: Clock, telemetry: Arc<TelemetryStore>, max_pending: usize) -> Arc<Self> {
        let handle = Arc::new(Self {
            state: Mutex::new(Locked { fabric, subs: HashMap::new() }),
            clock,
            telemetry,
            notify: Arc::new(Notify::new()),
            stopped: AtomicBool::new(false),
            max_pending,
            peak_open: AtomicUsize::new(0),
            driver: Mutex::new(None),
        });
        let task = tokio::spawn(drive(Arc::downgrade(&handle), handle.notify.clone(), clock));
        *handle.driver.lock() = Some(task);
        handle
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn telemetry(&self) -> &Arc<TelemetryStore> {
        &self.telemetry
    }

    /// Locks the fabric after bringing it up to the current time.
    pub fn lock(&self) -> FabricGuard<'_> {
        let mut guard = self.state.lock();
        guard.fabric.advance_to(self.clock.now());
        FabricGuard { handle: self, guard }
    }

    pub fn is_running(&self) -> bool {
        !self.stopped.load(Ordering::SeqCst)
    }

    /// Stops the driver; later submissions fail with `EndpointDown`.
    pub fn stop(&self) {
        self.stopped.store(true, Ordering::SeqCst);
        if let Some(task) = self.driver.lock().take() {
            task.abort();
        }
    }

    pub fn stats(&self) -> FabricStats {
        self.state.lock().fabric.stats().clone()
    }

    /// Unresolved tasks right now.
    pub fn open_tasks(&self) -> usize {
        self.state.lock().fabric.open_tasks()
    }

    /// Highest number of unresolved tasks seen at a submission.
    pub fn peak_open(&self) -> usize {
        self.peak_open.load(Ordering::Relaxed)
    }

    /// Submits a task to the endpoint chosen by `pick`, which runs under the
    /// same lock so selection and submission see one consistent state.
    pub fn submit(
        &self,
        spec: TaskSpec,
        meta: TaskMeta,
        tx: EventSender,
        pick: impl FnOnce(&Fabric) -> Result<String, DispatchError>,
    ) -> Result<(TaskId, String), DispatchError> {
        let mut g = self.lock();
        let endpoint = pick(&g)?;
        let model = spec.model.clone();
        let id = self.admit(&mut g, true, |f| f.submit(spec, &endpoint))?;
        g.guard.subs.insert(id, Subscriber { tx, meta, model, endpoint: endpoint.clone(), started: None });
        Ok((id, endpoint))
    }

    /// Submits a task for a dedicated instance. Batch work has its own queue
    /// and is not subject to the pending limit.
    pub fn submit_dedicated(
        &self,
        spec: TaskSpec,
        instance: InstanceId,
        meta: TaskMeta,
        tx: EventSender,
    ) -> Result<TaskId, DispatchError> {
        let mut g = self.lock();
        let endpoint = g.instance(instance).map(|i| i.endpoint.clone()).unwrap_or_default();
        let model = spec.model.clone();
        let id = self.admit(&mut g, false, |f| f.submit_dedicated(spec, instance))?;
        g.guard.subs.insert(id, Subscriber { tx, meta, model, endpoint, started: None });
        Ok(id)
    }

    /// Starts a dedicated instance for `owner` on the endpoint chosen by
    /// `pick` and queues every task on it, all under one lock.
    pub fn submit_batch(
        &self,
        model: &str,
        owner: u64,
        pick: impl FnOnce(&Fabric) -> Result<String, DispatchError>,
        lines: Vec<(TaskSpec, TaskMeta)>,
        tx: EventSender,
    ) -> Result<(InstanceId, String, Vec<TaskId>), DispatchError> {
        let mut g = self.lock();
        if !self.is_running() {
            return Err(DispatchError::EndpointDown);
        }
        let endpoint = pick(&g)?;
        let instance = g.create_dedicated(model, &endpoint, owner)?;
        let mut ids = Vec::with_capacity(lines.len());
        for (spec, meta) in lines {
            match self.admit(&mut g, false, |f| f.submit_dedicated(spec, instance)) {
                Ok(id) => {
                    g.guard.subs.insert(
                        id,
                        Subscriber {
                            tx: tx.clone(),
                            meta,
                            model: model.to_string(),
                            endpoint: endpoint.clone(),
                            started: None,
                        },
                    );
                    ids.push(id);
                }
                Err(e) => {
                    for id in ids {
                        let _ = g.cancel(id);
                    }
                    let _ = g.release_instance(instance);
                    return Err(e);
                }
            }
        }
        Ok((instance, endpoint, ids))
    }

    fn admit(
        &self,
        g: &mut FabricGuard<'_>,
        bounded: bool,
        submit: impl FnOnce(&mut Fabric) -> Result<TaskId, FabricError>,
    ) -> Result<TaskId, DispatchError> {
        if !self.is_running() {
            return Err(DispatchError::EndpointDown);
        }
        let open = g.open_tasks();
        if bounded && open >= self.max_pending {
            return Err(DispatchError::Backpressure(open));
        }
        let id = submit(&mut g.guard.fabric)?;
        self.peak_open.fetch_max(open + 1, Ordering::Relaxed);
        Ok(id)
    }

    pub fn cancel(&self, task: TaskId) {
        let _ = self.lock().cancel(task);
    }

    pub fn complete_external(
        &self,
        task: TaskId,
        attempt: u32,
        result: Result<u32, (Option<u16>, String)>,
    ) -> Result<(), FabricError> {
        self.lock().complete_external(task, attempt, result)
    }

    /// Advances and routes without waking the driver, which is the caller.
    fn tick(&self) -> Option<SimTime> {
        let mut guard = self.state.lock();
        guard.fabric.advance_to(self.clock.now());
        self.route(&mut guard);
        guard.fabric.next_event_time()
    }

    fn route(&self, locked: &mut Locked) {
        let Locked { fabric, subs } = locked;
        for output in fabric.drain_outputs() {
            let (task, event) = match output {
                Output::Started { task, instance, attempt, at } => {
                    if let Some(s) = subs.get_mut(&task) {
                        s.started = Some(at);
                    }
                    (task, TaskEvent::Started { instance, attempt, at })
                }
                Output::Token { task, index, at } => (task, TaskEvent::Token { index, at }),
                Output::ExecuteExternal { task, instance, attempt } => (task, TaskEvent::Execute { instance, attempt }),
                Output::Completed { task, report, .. } => (task, TaskEvent::Completed(report)),
                Output::Failed { task, at, error } => (task, TaskEvent::Failed { error, at }),
                Output::InstanceChanged { .. } => continue,
            };
            if event.is_terminal() {
                if let Some(sub) = subs.remove(&task) {
                    self.telemetry.record(usage_record(&sub, &event));
                    let _ = sub.tx.send((task, event));
                }
            } else if let Some(sub) = subs.get(&task) {
                let _ = sub.tx.send((task, event));
            }
        }
    }
}

fn usage_record(sub: &Subscriber, event: &TaskEvent) -> UsageRecord {
    let meta = &sub.meta;
    let mut record = UsageRecord {
        request_id: meta.request_id.clone(),
        subject: meta.subject.clone(),
        model: sub.model.clone(),
        endpoint: Some(sub.endpoint.clone()),
        kind: meta.kind,
        stream: meta.stream,
        prompt_tokens: meta.prompt_tokens,
        completion_tokens: 0,
        arrived_us: meta.arrived.as_micros(),
        dispatched_us: None,
        started_us: sub.started.map(SimTime::as_micros),
        completed_us: 0,
        outcome: Outcome::Ok,
        instance: None,
        attempts: 0,
        cold_start: None,
    };
    match event {
        TaskEvent::Completed(report) => {
            record.dispatched_us = Some(report.submitted_at.as_micros());
            record.started_us = Some(report.started_at.as_micros());
            record.completed_us = report.finished_at.as_micros();
            record.endpoint = Some(report.endpoint.clone());
            record.instance = Some(report.instance.0);
            record.attempts = report.attempts;
            record.cold_start = report.cold.map(Into::into);
            if meta.kind != RequestKind::Embedding {
                record.completion_tokens = report.units;
            }
        }
        TaskEvent::Failed { error, at } => {
            record.completed_us = at.as_micros();
            record.outcome = Outcome::Error { code: task_error_status(error) };
        }
        _ => {}
    }
    record
}

async fn drive(handle: std::sync::Weak<FabricHandle>, notify: Arc<Notify>, clock: Clock) {
    loop {
        let next = {
            let Some(h) = handle.upgrade() else { return };
            if !h.is_running() {
                return;
            }
            h.tick()
        };
        let notified = notify.notified();
        match next {
            Some(at) => {
                tokio::select! {
                    _ = clock.sleep_until(at) => {}
                    _ = notified => {}
                }
            }
            None => notified.await,
        }
    }
}

/// Drops a task from the fabric unless it was marked finished, so a client
/// that goes away stops holding a slot.
pub struct CancelOnDrop {
    handle: Arc<FabricHandle>,
    task: TaskId,
    armed: bool,
}

impl CancelOnDrop {
    pub fn new(handle: Arc<FabricHandle>, task: TaskId) -> Self {
        Self { handle, task, armed: true }
    }

    pub fn disarm(&mut self) {
        self.armed = false;
    }
}

impl Drop for CancelOnDrop {
    fn drop(&mut self) {
        if self.armed {
            self.handle.cancel(self.task);
        }
    }
}
