//! Event-driven simulator of the HPC side.
//!
//! One [`Fabric`] owns every cluster, instance and task. Time only moves when
//! the driver calls [`Fabric::advance_to`] or [`Fabric::step`]; all results
//! come out of [`Fabric::drain_outputs`] in the order they happened.
//!
//! Instance lifecycle: `queued` while the allocation job waits in the cluster's
//! FIFO, `starting` from node allocation through job launch and weight loading,
//! then `running`. Failed instances are re-queued by the health tick; idle ones
//! are released by the reaper.

mod audit;
mod task;

use alloc::collections::{BTreeMap, BinaryHeap, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::{Ordering, Reverse};
use core::fmt;

pub use task::{ColdStart, Output, Pool, TaskError, TaskId, TaskReport, TaskSpec};

use crate::backend;
use crate::instance::{FailureCause, InstanceId, InstanceState, Lifecycle, ModelInstance};
use crate::placement::{ClusterNodes, ClusterSpec, GpuRef, Holder, PlacementError};
use crate::registry::{BackendKind, EndpointSpec, ModelKind, ModelSpec, Registry, RegistryError};
use crate::select::{ClusterStatus, InstanceSummary};
use crate::time::{SimDuration, SimTime};

#[derive(Debug, Clone, PartialEq)]
pub struct FabricConfig {
    /// `None` disables the periodic tick.
    pub autoscale_interval: Option<SimDuration>,
    pub health_interval: Option<SimDuration>,
    pub reaper_interval: Option<SimDuration>,
    pub idle_timeout: SimDuration,
    /// Re-dispatches allowed after the first attempt dies with its instance.
    pub retry_cap: u32,
    pub load_base: SimDuration,
    /// Bytes per second.
    pub load_bandwidth: f64,
    /// From node allocation until the job is up and can start loading.
    pub allocation_delay: SimDuration,
    /// When every instance slot is taken, queue tasks instead of refusing them.
    pub instance_queueing: bool,
    /// Check invariants after every event.
    pub audit: bool,
    /// Keep a copy of every output for replay comparison.
    pub trace: bool,
}

impl Default for FabricConfig {
    fn default() -> Self {
        Self {
            autoscale_interval: Some(SimDuration::from_secs(1)),
            health_interval: Some(SimDuration::from_secs(1)),
            reaper_interval: Some(SimDuration::from_secs(1)),
            idle_timeout: SimDuration::from_secs(7200),
            retry_cap: 2,
            load_base: SimDuration::from_secs(10),
            load_bandwidth: 2e9,
            allocation_delay: SimDuration::from_secs(5),
            instance_queueing: true,
            audit: false,
            trace: false,
        }
    }
}

impl FabricConfig {
    /// Simulated weight-loading time for `spec`.
    pub fn load_time(&self, spec: &ModelSpec) -> SimDuration {
        let transfer = if self.load_bandwidth > 0.0 { spec.weight_bytes() as f64 / self.load_bandwidth } else { 0.0 };
        self.load_base + SimDuration::from_secs_f64(transfer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FabricError {
    UnknownModel(String),
    UnknownEndpoint(String),
    UnknownCluster(String),
    UnknownInstance(InstanceId),
    UnknownTask(TaskId),
    NotHosted {
        model: String,
        endpoint: String,
    },
    UnregisteredFunction {
        function: String,
        endpoint: String,
    },
    CapacityExceeded {
        model: String,
        endpoint: String,
    },
    NotDedicated(InstanceId),
    /// The attempt being completed is no longer the live one.
    StaleAttempt(TaskId),
    Placement(PlacementError),
    Registry(RegistryError),
}

impl fmt::Display for FabricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::UnknownModel(m) => write!(f, "unknown model {m}"),
            Self::UnknownEndpoint(e) => write!(f, "unknown endpoint {e}"),
            Self::UnknownCluster(c) => write!(f, "unknown cluster {c}"),
            Self::UnknownInstance(i) => write!(f, "unknown instance {i}"),
            Self::UnknownTask(t) => write!(f, "unknown task {t}"),
            Self::NotHosted { model, endpoint } => write!(f, "endpoint {endpoint} does not host {model}"),
            Self::UnregisteredFunction { function, endpoint } => {
                write!(f, "function {function} is not registered on endpoint {endpoint}")
            }
            Self::CapacityExceeded { model, endpoint } => {
                write!(f, "all instances of {model} on {endpoint} are saturated")
            }
            Self::NotDedicated(i) => write!(f, "{i} is not a dedicated instance"),
            Self::StaleAttempt(t) => write!(f, "stale attempt for {t}"),
            Self::Placement(e) => write!(f, "{e}"),
            Self::Registry(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for FabricError {}

impl From<RegistryError> for FabricError {
    fn from(e: RegistryError) -> Self {
        Self::Registry(e)
    }
}

impl From<PlacementError> for FabricError {
    fn from(e: PlacementError) -> Self {
        Self::Placement(e)
    }
}

/// Which instance an injected fault hits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultTarget {
    Instance(InstanceId),
    /// Lowest-id running instance of the model.
    Model(String),
    /// The `n mod count`-th running instance, for randomized schedules.
    NthRunning(u64),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FabricStats {
    pub submitted: u64,
    pub completed: u64,
    pub failed: u64,
    /// Tokens produced by the backend, including attempts that were lost.
    pub tokens_emitted: u64,
    /// Generated tokens of completed tasks.
    pub tokens_delivered: u64,
    pub instances_created: u64,
    pub allocation_jobs: u64,
    pub restarts: u64,
    pub retries: u64,
    pub releases: u64,
    pub faults_injected: u64,
    pub illegal_transitions: u64,
    pub invariant_violations: u64,
    pub events: u64,
    /// Highest in-flight count any single instance ever reached.
    pub peak_in_flight: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Event {
    AutoscaleTick,
    HealthTick,
    ReaperTick,
    LoadStart { instance: InstanceId, epoch: u32 },
    LoadDone { instance: InstanceId, epoch: u32 },
    Token { task: TaskId, attempt: u32, index: u32 },
    Finish { task: TaskId, attempt: u32 },
    Fault(FaultTarget),
    ExternalArrive { cluster: usize, gpus: u32, duration: SimDuration },
    ExternalDone { job: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Scheduled {
    at: SimTime,
    seq: u64,
    event: Event,
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Owner {
    Instance { id: InstanceId, epoch: u32 },
    External { duration: SimDuration },
}

#[derive(Debug, Clone)]
struct AllocJob {
    id: u64,
    owner: Owner,
    gpus: u32,
}

#[derive(Debug, Clone)]
struct Cluster {
    nodes: ClusterNodes,
    queue: VecDeque<AllocJob>,
}

#[derive(Debug, Clone)]
struct Task {
    spec: TaskSpec,
    pool: Pool,
    submitted_at: SimTime,
    attempt: u32,
    instance: Option<InstanceId>,
    started_at: SimTime,
    cold: Option<ColdStart>,
}

#[derive(Debug, Clone)]
pub struct Fabric {
    config: FabricConfig,
    now: SimTime,
    registry: Registry,
    clusters: Vec<Cluster>,
    cluster_index: BTreeMap<String, usize>,
    instances: BTreeMap<InstanceId, ModelInstance>,
    tasks: BTreeMap<TaskId, Task>,
    pools: BTreeMap<Pool, VecDeque<TaskId>>,
    external: BTreeMap<u64, (usize, Vec<GpuRef>)>,
    events: BinaryHeap<Reverse<Scheduled>>,
    outputs: VecDeque<Output>,
    trace: Vec<Output>,
    violations: Vec<String>,
    stats: FabricStats,
    seq: u64,
    next_instance: u64,
    next_task: u64,
    next_job: u64,
}

impl Fabric {
    pub fn new(config: FabricConfig, clusters: impl IntoIterator<Item = ClusterSpec>) -> Self {
        let mut fabric = Self {
            config,
            now: SimTime::ZERO,
            registry: Registry::new(),
            clusters: Vec::new(),
            cluster_index: BTreeMap::new(),
            instances: BTreeMap::new(),
            tasks: BTreeMap::new(),
            pools: BTreeMap::new(),
            external: BTreeMap::new(),
            events: BinaryHeap::new(),
            outputs: VecDeque::new(),
            trace: Vec::new(),
            violations: Vec::new(),
            stats: FabricStats::default(),
            seq: 0,
            next_instance: 1,
            next_task: 1,
            next_job: 1,
        };
        for spec in clusters {
            fabric.add_cluster(spec);
        }
        let ticks = [
            (fabric.config.autoscale_interval, Event::AutoscaleTick),
            (fabric.config.health_interval, Event::HealthTick),
            (fabric.config.reaper_interval, Event::ReaperTick),
        ];
        for (interval, event) in ticks {
            if let Some(every) = interval {
                fabric.schedule(SimTime::ZERO + every, event);
            }
        }
        fabric
    }

    /// Adds a cluster; a repeated id replaces nothing and is ignored.
    pub fn add_cluster(&mut self, spec: ClusterSpec) {
        if self.cluster_index.contains_key(&spec.id) {
            return;
        }
        self.cluster_index.insert(spec.id.clone(), self.clusters.len());
        self.clusters.push(Cluster { nodes: ClusterNodes::new(spec), queue: VecDeque::new() });
    }

    pub fn register_endpoint(&mut self, spec: EndpointSpec) -> Result<(), FabricError> {
        if !self.cluster_index.contains_key(&spec.cluster) {
            return Err(FabricError::UnknownCluster(spec.cluster));
        }
        Ok(self.registry.register_endpoint(spec)?)
    }

    pub fn register_model<S: AsRef<str>>(&mut self, spec: ModelSpec, endpoints: &[S]) -> Result<(), FabricError> {
        Ok(self.registry.register_model(spec, endpoints)?)
    }

    pub fn config(&self) -> &FabricConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn stats(&self) -> &FabricStats {
        &self.stats
    }

    /// Invariant violations seen so far (audit mode only).
    pub fn violations(&self) -> &[String] {
        &self.violations
    }

    /// Every output produced so far, when tracing is on.
    pub fn trace(&self) -> &[Output] {
        &self.trace
    }

    pub fn drain_outputs(&mut self) -> Vec<Output> {
        self.outputs.drain(..).collect()
    }

    pub fn instance(&self, id: InstanceId) -> Option<&ModelInstance> {
        self.instances.get(&id)
    }

    /// Live instances in id order.
    pub fn instances(&self) -> impl Iterator<Item = &ModelInstance> {
        self.instances.values()
    }

    /// State of the online (shared) instances, as seen by endpoint selection.
    pub fn summaries(&self) -> Vec<InstanceSummary> {
        self.instances
            .values()
            .filter(|i| i.dedicated_to.is_none())
            .map(|i| InstanceSummary { model: i.model.clone(), endpoint: i.endpoint.clone(), state: i.state })
            .collect()
    }

    pub fn cluster_status(&self, cluster: &str) -> Result<ClusterStatus, FabricError> {
        let &ci = self.cluster_index.get(cluster).ok_or_else(|| FabricError::UnknownCluster(String::from(cluster)))?;
        Ok(self.status_of(ci))
    }

    pub fn cluster_statuses(&self) -> Vec<ClusterStatus> {
        (0..self.clusters.len()).map(|ci| self.status_of(ci)).collect()
    }

    fn status_of(&self, ci: usize) -> ClusterStatus {
        let c = &self.clusters[ci];
        ClusterStatus {
            cluster_id: c.nodes.spec.id.clone(),
            total_nodes: c.nodes.spec.nodes,
            free_nodes: c.nodes.free_nodes(),
            queued_jobs: c.queue.len() as u32,
            gpus_per_node: c.nodes.spec.gpus_per_node,
            observed_at: self.now,
        }
    }

    pub fn cluster_nodes(&self, cluster: &str) -> Option<&ClusterNodes> {
        self.cluster_index.get(cluster).map(|&ci| &self.clusters[ci].nodes)
    }

    /// Tasks submitted and not yet resolved.
    pub fn open_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Tasks waiting for a slot, over all pools.
    pub fn pending(&self) -> usize {
        self.pools.values().map(VecDeque::len).sum()
    }

    pub fn pending_in(&self, pool: &Pool) -> usize {
        self.pools.get(pool).map_or(0, VecDeque::len)
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.events.peek().map(|Reverse(s)| s.at)
    }

    /// Processes every event due at or before `t`, then moves the clock to `t`.
    pub fn advance_to(&mut self, t: SimTime) {
        while self.next_event_time().is_some_and(|at| at <= t) {
            self.step();
        }
        if t > self.now {
            self.now = t;
        }
    }

    /// Processes the next event. Returns false when nothing is scheduled.
    pub fn step(&mut self) -> bool {
        let Some(Reverse(next)) = self.events.pop() else {
            return false;
        };
        if next.at > self.now {
            self.now = next.at;
        }
        self.stats.events += 1;
        self.handle(next.event);
        self.audit();
        true
    }

    /// Runs until every task has resolved or `limit` is reached.
    pub fn run_until_idle(&mut self, limit: SimTime) {
        while !self.tasks.is_empty() && self.next_event_time().is_some_and(|at| at <= limit) {
            self.step();
        }
    }

    fn schedule(&mut self, at: SimTime, event: Event) {
        self.seq += 1;
        self.events.push(Reverse(Scheduled { at, seq: self.seq, event }));
    }

    fn emit(&mut self, output: Output) {
        if self.config.trace {
            self.trace.push(output.clone());
        }
        self.outputs.push_back(output);
    }

    fn audit(&mut self) {
        if !self.config.audit {
            return;
        }
        if let Err(v) = self.check_invariants() {
            self.stats.invariant_violations += v.len() as u64;
            self.violations.extend(v);
        }
    }

    // ---- submission ------------------------------------------------------

    /// Queues an online task for `spec.model` on `endpoint`.
    pub fn submit(&mut self, spec: TaskSpec, endpoint: &str) -> Result<TaskId, FabricError> {
        let ep = self.check_target(&spec.model, endpoint)?;
        if !ep.allows(&spec.function) {
            return Err(FabricError::UnregisteredFunction {
                function: spec.function,
                endpoint: String::from(endpoint),
            });
        }
        self.ensure_instance(&spec.model, endpoint)?;
        let pool = Pool::Online { model: spec.model.clone(), endpoint: String::from(endpoint) };
        let id = self.enqueue(spec, pool.clone());
        self.dispatch(&pool);
        self.audit();
        Ok(id)
    }

    /// Queues a task that may only run on the dedicated instance `instance`.
    pub fn submit_dedicated(&mut self, spec: TaskSpec, instance: InstanceId) -> Result<TaskId, FabricError> {
        let inst = self.instances.get(&instance).ok_or(FabricError::UnknownInstance(instance))?;
        if inst.dedicated_to.is_none() {
            return Err(FabricError::NotDedicated(instance));
        }
        let endpoint = inst.endpoint.clone();
        let ep = self.check_target(&spec.model, &endpoint)?;
        if !ep.allows(&spec.function) {
            return Err(FabricError::UnregisteredFunction { function: spec.function, endpoint });
        }
        let pool = Pool::Dedicated(instance);
        let id = self.enqueue(spec, pool.clone());
        self.dispatch(&pool);
        self.audit();
        Ok(id)
    }

    fn check_target(&self, model: &str, endpoint: &str) -> Result<&EndpointSpec, FabricError> {
        let entry = self.registry.entry(model).ok_or_else(|| FabricError::UnknownModel(String::from(model)))?;
        let ep =
            self.registry.endpoint(endpoint).ok_or_else(|| FabricError::UnknownEndpoint(String::from(endpoint)))?;
        if !entry.routes.iter().any(|r| r.endpoint == endpoint) {
            return Err(FabricError::NotHosted { model: String::from(model), endpoint: String::from(endpoint) });
        }
        Ok(ep)
    }

    fn enqueue(&mut self, spec: TaskSpec, pool: Pool) -> TaskId {
        let id = TaskId(self.next_task);
        self.next_task += 1;
        self.stats.submitted += 1;
        self.tasks.insert(
            id,
            Task {
                spec,
                pool: pool.clone(),
                submitted_at: self.now,
                attempt: 0,
                instance: None,
                started_at: self.now,
                cold: None,
            },
        );
        self.pools.entry(pool).or_default().push_back(id);
        id
    }

    /// Returns an instance that will serve `model` on `endpoint`, creating one
    /// when the capacity rules allow it.
    pub fn ensure_instance(&mut self, model: &str, endpoint: &str) -> Result<InstanceId, FabricError> {
        let ep = self.check_target(model, endpoint)?;
        let max = ep.max_instances_per_model;
        let live: Vec<&ModelInstance> = self.online(model, endpoint).collect();
        let spare = live.iter().filter(|i| i.has_spare_slot()).min_by_key(|i| (i.in_flight, i.id));
        if let Some(i) = spare {
            return Ok(i.id);
        }
        let provisioning = live
            .iter()
            .filter(|i| matches!(i.state, InstanceState::Queued | InstanceState::Starting))
            .map(|i| i.id)
            .min();
        if let Some(id) = provisioning {
            return Ok(id);
        }
        if (live.len() as u32) < max {
            return self.create_instance(model, endpoint, None);
        }
        if self.config.instance_queueing {
            let least_loaded = live.iter().filter(|i| i.state.is_active()).min_by_key(|i| (i.in_flight, i.id));
            if let Some(i) = least_loaded.or(live.first()) {
                return Ok(i.id);
            }
        }
        Err(FabricError::CapacityExceeded { model: String::from(model), endpoint: String::from(endpoint) })
    }

    /// Starts an instance that only serves tasks submitted with
    /// [`submit_dedicated`](Self::submit_dedicated).
    pub fn create_dedicated(&mut self, model: &str, endpoint: &str, owner: u64) -> Result<InstanceId, FabricError> {
        self.check_target(model, endpoint)?;
        self.create_instance(model, endpoint, Some(owner))
    }

    fn online<'a>(&'a self, model: &'a str, endpoint: &'a str) -> impl Iterator<Item = &'a ModelInstance> + 'a {
        self.instances.values().filter(move |i| i.dedicated_to.is_none() && i.model == model && i.endpoint == endpoint)
    }

    fn create_instance(
        &mut self,
        model: &str,
        endpoint: &str,
        dedicated: Option<u64>,
    ) -> Result<InstanceId, FabricError> {
        let ep =
            self.registry.endpoint(endpoint).ok_or_else(|| FabricError::UnknownEndpoint(String::from(endpoint)))?;
        let spec = self.registry.model(model).ok_or_else(|| FabricError::UnknownModel(String::from(model)))?;
        let gpus = spec.gpus_required;
        let cluster = ep.cluster.clone();
        let max_parallel = ep.max_parallel_per_instance.max(1);
        let &ci = self.cluster_index.get(&cluster).ok_or_else(|| FabricError::UnknownCluster(cluster.clone()))?;
        let nodes = &self.clusters[ci].nodes;
        if u64::from(nodes.footprint(gpus)) > nodes.spec.total_gpus() {
            return Err(PlacementError::TooLarge { requested: gpus, capacity: nodes.spec.total_gpus() }.into());
        }
        let id = InstanceId(self.next_instance);
        self.next_instance += 1;
        let inst = ModelInstance::new(
            id,
            String::from(model),
            String::from(endpoint),
            cluster,
            max_parallel,
            self.now,
            dedicated,
        );
        self.instances.insert(id, inst);
        self.stats.instances_created += 1;
        self.emit(Output::InstanceChanged { instance: id, from: None, to: InstanceState::Queued, at: self.now });
        self.push_alloc_job(ci, Owner::Instance { id, epoch: 0 }, gpus);
        Ok(id)
    }

    fn push_alloc_job(&mut self, ci: usize, owner: Owner, gpus: u32) {
        let id = self.next_job;
        self.next_job += 1;
        self.stats.allocation_jobs += 1;
        self.clusters[ci].queue.push_back(AllocJob { id, owner, gpus });
        self.run_scheduler(ci);
    }

    /// Adds a job from another tenant to `cluster`'s queue at `at`. It holds
    /// its nodes for `duration` once allocated.
    pub fn submit_background_job(
        &mut self,
        cluster: &str,
        at: SimTime,
        gpus: u32,
        duration: SimDuration,
    ) -> Result<(), FabricError> {
        let &ci = self.cluster_index.get(cluster).ok_or_else(|| FabricError::UnknownCluster(String::from(cluster)))?;
        self.schedule(at.max(self.now), Event::ExternalArrive { cluster: ci, gpus, duration });
        Ok(())
    }

    pub fn schedule_fault(&mut self, at: SimTime, target: FaultTarget) {
        self.schedule(at.max(self.now), Event::Fault(target));
    }

    /// Fails `instance` now, as if its node crashed.
    pub fn inject_failure(&mut self, instance: InstanceId) -> Result<(), FabricError> {
        let inst = self.instances.get(&instance).ok_or(FabricError::UnknownInstance(instance))?;
        if inst.state == InstanceState::Failed {
            return Ok(());
        }
        self.stats.faults_injected += 1;
        self.fail_instance(instance, FailureCause::Injected);
        self.audit();
        Ok(())
    }

    // ---- cluster scheduler -----------------------------------------------

    /// Strict FIFO: the head job blocks everything behind it until it fits.
    fn run_scheduler(&mut self, ci: usize) {
        while let Some(job) = self.clusters[ci].queue.front().cloned() {
            if let Owner::Instance { id, epoch } = job.owner {
                let live =
                    self.instances.get(&id).is_some_and(|i| i.epoch == epoch && i.state == InstanceState::Queued);
                if !live {
                    self.clusters[ci].queue.pop_front();
                    continue;
                }
            }
            let holder = match job.owner {
                Owner::Instance { id, .. } => Holder::Instance(id.0),
                Owner::External { .. } => Holder::External(job.id),
            };
            match self.clusters[ci].nodes.allocate(job.gpus, holder) {
                Ok(gpus) => {
                    self.clusters[ci].queue.pop_front();
                    match job.owner {
                        Owner::Instance { id, .. } => self.on_allocated(id, gpus),
                        Owner::External { duration } => {
                            self.external.insert(job.id, (ci, gpus));
                            self.schedule(self.now + duration, Event::ExternalDone { job: job.id });
                        }
                    }
                }
                Err(PlacementError::InsufficientResources { .. }) => break,
                Err(PlacementError::TooLarge { .. }) => {
                    self.clusters[ci].queue.pop_front();
                    if let Owner::Instance { id, .. } = job.owner {
                        self.fail_instance(id, FailureCause::InsufficientVram);
                    }
                }
            }
        }
    }

    fn on_allocated(&mut self, id: InstanceId, gpus: Vec<GpuRef>) {
        let now = self.now;
        let delay = self.config.allocation_delay;
        let Some(inst) = self.instances.get_mut(&id) else { return };
        inst.gpus = gpus;
        inst.lifecycle.allocated_at = Some(now);
        let epoch = inst.epoch;
        self.set_state(id, InstanceState::Starting);
        self.schedule(now + delay, Event::LoadStart { instance: id, epoch });
    }

    fn set_state(&mut self, id: InstanceId, to: InstanceState) {
        let now = self.now;
        let Some(inst) = self.instances.get_mut(&id) else { return };
        let from = inst.state;
        match inst.transition(to) {
            Ok(()) => self.emit(Output::InstanceChanged { instance: id, from: Some(from), to, at: now }),
            Err(e) => {
                self.stats.illegal_transitions += 1;
                self.violations.push(alloc::format!("{e}"));
            }
        }
    }

    fn cluster_of(&self, inst: &ModelInstance) -> usize {
        self.cluster_index[&inst.cluster]
    }

    fn free_gpus_of(&mut self, id: InstanceId) {
        let Some(inst) = self.instances.get_mut(&id) else { return };
        let gpus = core::mem::take(&mut inst.gpus);
        let ci = self.cluster_index[&inst.cluster];
        self.clusters[ci].nodes.release(&gpus, Holder::Instance(id.0));
        self.run_scheduler(ci);
    }

    // ---- event handlers --------------------------------------------------

    fn handle(&mut self, event: Event) {
        match event {
            Event::AutoscaleTick => {
                self.autoscale_tick();
                if let Some(every) = self.config.autoscale_interval {
                    self.schedule(self.now + every, Event::AutoscaleTick);
                }
            }
            Event::HealthTick => {
                self.health_tick();
                if let Some(every) = self.config.health_interval {
                    self.schedule(self.now + every, Event::HealthTick);
                }
            }
            Event::ReaperTick => {
                self.idle_reaper_tick();
                if let Some(every) = self.config.reaper_interval {
                    self.schedule(self.now + every, Event::ReaperTick);
                }
            }
            Event::LoadStart { instance, epoch } => self.on_load_start(instance, epoch),
            Event::LoadDone { instance, epoch } => self.on_load_done(instance, epoch),
            Event::Token { task, attempt, index } => self.on_token(task, attempt, index),
            Event::Finish { task, attempt } => {
                if self.is_live_attempt(task, attempt) {
                    self.finish_task(task, None);
                }
            }
            Event::Fault(target) => self.on_fault(target),
            Event::ExternalArrive { cluster, gpus, duration } => {
                self.push_alloc_job(cluster, Owner::External { duration }, gpus);
            }
            Event::ExternalDone { job } => {
                if let Some((ci, gpus)) = self.external.remove(&job) {
                    self.clusters[ci].nodes.release(&gpus, Holder::External(job));
                    self.run_scheduler(ci);
                }
            }
        }
    }

    fn live_epoch(&self, id: InstanceId, epoch: u32, state: InstanceState) -> bool {
        self.instances.get(&id).is_some_and(|i| i.epoch == epoch && i.state == state)
    }

    fn on_load_start(&mut self, id: InstanceId, epoch: u32) {
        if !self.live_epoch(id, epoch, InstanceState::Starting) {
            return;
        }
        let inst = &self.instances[&id];
        let Some(spec) = self.registry.model(&inst.model) else { return };
        let vram = self.clusters[self.cluster_of(inst)].nodes.spec.vram_per_gpu;
        // Weights shard over the tensor-parallel GPUs, not every GPU of the reserved nodes.
        let capacity = vram.saturating_mul(u64::from(spec.gpus_required));
        if spec.weight_bytes() > capacity {
            self.fail_instance(id, FailureCause::InsufficientVram);
            return;
        }
        let load = self.config.load_time(spec);
        let now = self.now;
        if let Some(inst) = self.instances.get_mut(&id) {
            inst.lifecycle.loading_at = Some(now);
        }
        self.schedule(now + load, Event::LoadDone { instance: id, epoch });
    }

    fn on_load_done(&mut self, id: InstanceId, epoch: u32) {
        if !self.live_epoch(id, epoch, InstanceState::Starting) {
            return;
        }
        let now = self.now;
        if let Some(inst) = self.instances.get_mut(&id) {
            inst.lifecycle.running_at = Some(now);
            inst.last_active_at = now;
        }
        self.set_state(id, InstanceState::Running);
        if self.instances[&id].release_requested {
            self.release_now(id);
            return;
        }
        let pool = self.pool_of(id);
        self.dispatch(&pool);
    }

    fn on_fault(&mut self, target: FaultTarget) {
        let running: Vec<InstanceId> =
            self.instances.values().filter(|i| i.state == InstanceState::Running).map(|i| i.id).collect();
        let victim = match target {
            FaultTarget::Instance(id) => self.instances.contains_key(&id).then_some(id),
            FaultTarget::Model(model) => running.iter().copied().find(|id| self.instances[id].model == model),
            FaultTarget::NthRunning(n) => (!running.is_empty()).then(|| running[(n % running.len() as u64) as usize]),
        };
        if let Some(id) = victim {
            let _ = self.inject_failure(id);
        }
    }

    fn pool_of(&self, id: InstanceId) -> Pool {
        let inst = &self.instances[&id];
        match inst.dedicated_to {
            Some(_) => Pool::Dedicated(id),
            None => Pool::Online { model: inst.model.clone(), endpoint: inst.endpoint.clone() },
        }
    }

    /// Starts queued tasks of `pool` while a slot is free, least-loaded instance first.
    fn dispatch(&mut self, pool: &Pool) {
        loop {
            let Some(&task) = self.pools.get(pool).and_then(VecDeque::front) else { break };
            let target = match pool {
                Pool::Dedicated(id) => self.instances.get(id).filter(|i| i.has_spare_slot()).map(|i| i.id),
                Pool::Online { model, endpoint } => self
                    .online(model, endpoint)
                    .filter(|i| i.has_spare_slot())
                    .min_by_key(|i| (i.in_flight, i.id))
                    .map(|i| i.id),
            };
            let Some(instance) = target else { break };
            if let Some(q) = self.pools.get_mut(pool) {
                q.pop_front();
            }
            self.start_task(task, instance);
        }
        if self.pools.get(pool).is_some_and(VecDeque::is_empty) {
            self.pools.remove(pool);
        }
    }

    fn start_task(&mut self, id: TaskId, instance: InstanceId) {
        let now = self.now;
        let Some(inst) = self.instances.get(&instance) else { return };
        let Some(ep) = self.registry.endpoint(&inst.endpoint) else { return };
        let Some(task) = self.tasks.get(&id) else { return };
        if !ep.allows(&task.spec.function) {
            self.resolve_failed(id, TaskError::UnregisteredFunction);
            return;
        }
        let Some(spec) = self.registry.model(&task.spec.model) else { return };
        let profile = spec.backend.clone();
        let max_parallel = inst.max_parallel;
        let cold = ColdStart::observed(&inst.lifecycle, task.submitted_at);

        let inst = self.instances.get_mut(&instance).expect("checked above");
        inst.in_flight += 1;
        inst.running_tasks.insert(id.0);
        inst.last_active_at = now;
        self.stats.peak_in_flight = self.stats.peak_in_flight.max(inst.in_flight);

        let task = self.tasks.get_mut(&id).expect("checked above");
        task.attempt += 1;
        task.instance = Some(instance);
        task.started_at = now;
        task.cold = cold;
        let attempt = task.attempt;
        let units = task.spec.output_units;
        let stream = task.spec.stream;
        self.emit(Output::Started { task: id, instance, attempt, at: now });

        match profile.kind {
            BackendKind::Passthrough => {
                self.emit(Output::ExecuteExternal { task: id, instance, attempt });
            }
            BackendKind::Mock if stream && units > 0 => {
                let at = now + backend::token_offset(&profile, max_parallel, 0);
                self.schedule(at, Event::Token { task: id, attempt, index: 0 });
            }
            BackendKind::Mock => {
                let at = now + backend::service_time(&profile, max_parallel, units);
                self.schedule(at, Event::Finish { task: id, attempt });
            }
        }
    }

    fn is_live_attempt(&self, task: TaskId, attempt: u32) -> bool {
        self.tasks.get(&task).is_some_and(|t| t.attempt == attempt && t.instance.is_some())
    }

    fn on_token(&mut self, id: TaskId, attempt: u32, index: u32) {
        if !self.is_live_attempt(id, attempt) {
            return;
        }
        self.stats.tokens_emitted += 1;
        self.emit(Output::Token { task: id, index, at: self.now });
        let task = &self.tasks[&id];
        if index + 1 >= task.spec.output_units {
            self.finish_task(id, None);
            return;
        }
        let Some(inst) = task.instance.and_then(|i| self.instances.get(&i)) else { return };
        let Some(spec) = self.registry.model(&task.spec.model) else { return };
        let at = task.started_at + backend::token_offset(&spec.backend, inst.max_parallel, index + 1);
        self.schedule(at, Event::Token { task: id, attempt, index: index + 1 });
    }

    /// Frees the slot held by `id`'s current attempt.
    fn release_slot(&mut self, id: TaskId) -> Option<InstanceId> {
        let now = self.now;
        let instance = self.tasks.get_mut(&id)?.instance.take()?;
        let inst = self.instances.get_mut(&instance)?;
        if inst.running_tasks.remove(&id.0) {
            inst.in_flight -= 1;
        }
        inst.last_active_at = now;
        Some(instance)
    }

    fn finish_task(&mut self, id: TaskId, external_units: Option<u32>) {
        let Some(task) = self.tasks.get(&id) else { return };
        let (started_at, submitted_at, attempts, cold, stream, kind) =
            (task.started_at, task.submitted_at, task.attempt, task.cold, task.spec.stream, task.spec.kind);
        let units = external_units.unwrap_or(task.spec.output_units);
        let Some(instance) = self.release_slot(id) else { return };
        self.tasks.remove(&id);
        let endpoint = self.instances.get(&instance).map(|i| i.endpoint.clone()).unwrap_or_default();
        if kind == ModelKind::Generation {
            if !stream || external_units.is_some() {
                self.stats.tokens_emitted += u64::from(units);
            }
            self.stats.tokens_delivered += u64::from(units);
        }
        self.stats.completed += 1;
        let report =
            TaskReport { instance, endpoint, submitted_at, started_at, finished_at: self.now, attempts, units, cold };
        self.emit(Output::Completed { task: id, at: self.now, report });
        if self.instances.contains_key(&instance) {
            let pool = self.pool_of(instance);
            self.dispatch(&pool);
        }
    }

    /// Resolves a task as failed, wherever it is.
    fn resolve_failed(&mut self, id: TaskId, error: TaskError) {
        let Some(task) = self.tasks.get(&id) else { return };
        let pool = task.pool.clone();
        if let Some(q) = self.pools.get_mut(&pool) {
            q.retain(|t| *t != id);
        }
        let freed = self.release_slot(id);
        self.tasks.remove(&id);
        self.stats.failed += 1;
        self.emit(Output::Failed { task: id, at: self.now, error });
        if let Some(instance) = freed.filter(|i| self.instances.contains_key(i)) {
            let pool = self.pool_of(instance);
            self.dispatch(&pool);
        }
    }

    /// Reports the outcome of an [`Output::ExecuteExternal`] attempt.
    /// `Ok` carries the number of units produced.
    pub fn complete_external(
        &mut self,
        task: TaskId,
        attempt: u32,
        result: Result<u32, (Option<u16>, String)>,
    ) -> Result<(), FabricError> {
        if !self.tasks.contains_key(&task) {
            return Err(FabricError::UnknownTask(task));
        }
        if !self.is_live_attempt(task, attempt) {
            return Err(FabricError::StaleAttempt(task));
        }
        match result {
            Ok(units) => self.finish_task(task, Some(units)),
            Err((status, message)) => self.resolve_failed(task, TaskError::External { status, message }),
        }
        self.audit();
        Ok(())
    }

    /// Cancels a task that has not resolved yet.
    pub fn cancel(&mut self, task: TaskId) -> Result<(), FabricError> {
        if !self.tasks.contains_key(&task) {
            return Err(FabricError::UnknownTask(task));
        }
        self.resolve_failed(task, TaskError::Cancelled);
        self.audit();
        Ok(())
    }

    // ---- failures --------------------------------------------------------

    fn fail_instance(&mut self, id: InstanceId, cause: FailureCause) {
        let Some(inst) = self.instances.get(&id) else { return };
        if matches!(inst.state, InstanceState::Failed | InstanceState::Released) {
            return;
        }
        self.set_state(id, InstanceState::Failed);
        let inst = self.instances.get_mut(&id).expect("present");
        inst.failure = Some(cause);
        inst.epoch += 1;
        inst.in_flight = 0;
        let orphans: Vec<u64> = core::mem::take(&mut inst.running_tasks).into_iter().collect();
        for t in &orphans {
            if let Some(task) = self.tasks.get_mut(&TaskId(*t)) {
                task.instance = None;
            }
        }
        let inst = self.instances.get_mut(&id).expect("present");
        inst.orphans.extend(orphans);
        self.free_gpus_of(id);

        if !cause.is_recoverable() {
            self.retire(id, TaskError::InsufficientVram);
        }
    }

    /// Drops a failed instance for good; its orphans and, if nothing else can
    /// serve them, its pool's pending tasks fail with `error`.
    fn retire(&mut self, id: InstanceId, error: TaskError) {
        let pool = self.pool_of(id);
        let Some(inst) = self.instances.remove(&id) else { return };
        for t in inst.orphans {
            self.resolve_failed(TaskId(t), error.clone());
        }
        let served = match &pool {
            Pool::Dedicated(_) => false,
            Pool::Online { model, endpoint } => self.online(model, endpoint).next().is_some(),
        };
        if !served {
            let pending: Vec<TaskId> = self.pools.remove(&pool).map(Vec::from).unwrap_or_default();
            for t in pending {
                self.resolve_failed(t, error.clone());
            }
        }
    }

    /// Re-queues failed instances and re-dispatches or fails their orphaned tasks.
    /// Returns the instances restarted.
    pub fn health_tick(&mut self) -> Vec<InstanceId> {
        let failed: Vec<InstanceId> =
            self.instances.values().filter(|i| i.state == InstanceState::Failed).map(|i| i.id).collect();
        let mut restarted = Vec::new();
        for id in failed {
            self.requeue_orphans(id);
            if self.instances[&id].release_requested {
                self.retire(id, TaskError::Cancelled);
                continue;
            }
            self.set_state(id, InstanceState::Queued);
            let now = self.now;
            let inst = self.instances.get_mut(&id).expect("present");
            inst.restarts += 1;
            inst.lifecycle = Lifecycle { queued_at: now, ..Lifecycle::default() };
            let (epoch, gpus) = (inst.epoch, self.registry.model(&inst.model).map_or(1, |m| m.gpus_required));
            self.stats.restarts += 1;
            let ci = self.cluster_of(&self.instances[&id]);
            self.push_alloc_job(ci, Owner::Instance { id, epoch }, gpus);
            restarted.push(id);
        }
        restarted
    }

    fn requeue_orphans(&mut self, id: InstanceId) {
        let orphans = core::mem::take(&mut self.instances.get_mut(&id).expect("present").orphans);
        let mut retry = Vec::new();
        for t in orphans {
            let t = TaskId(t);
            let Some(task) = self.tasks.get(&t) else { continue };
            if task.attempt > self.config.retry_cap {
                let attempts = task.attempt;
                self.resolve_failed(t, TaskError::Failed { attempts });
            } else {
                self.stats.retries += 1;
                retry.push((t, task.pool.clone()));
            }
        }
        for (t, pool) in retry.iter().rev() {
            self.pools.entry(pool.clone()).or_default().push_front(*t);
        }
        let mut pools: Vec<Pool> = retry.into_iter().map(|(_, p)| p).collect();
        pools.dedup();
        for pool in pools {
            self.dispatch(&pool);
        }
    }

    // ---- scaling ---------------------------------------------------------

    /// Adds one instance to every online pool that has queued work while all of
    /// its instances are saturated. Returns the instances created.
    pub fn autoscale_tick(&mut self) -> Vec<InstanceId> {
        let waiting: Vec<(String, String)> = self
            .pools
            .iter()
            .filter(|(_, q)| !q.is_empty())
            .filter_map(|(p, _)| match p {
                Pool::Online { model, endpoint } => Some((model.clone(), endpoint.clone())),
                Pool::Dedicated(_) => None,
            })
            .collect();
        let mut created = Vec::new();
        for (model, endpoint) in waiting {
            let Some(max) = self.registry.endpoint(&endpoint).map(|e| e.max_instances_per_model) else { continue };
            let live: Vec<&ModelInstance> = self.online(&model, &endpoint).collect();
            let saturated = live.iter().all(|i| i.is_saturated());
            if saturated && (live.len() as u32) < max {
                if let Ok(id) = self.create_instance(&model, &endpoint, None) {
                    created.push(id);
                }
            }
        }
        created
    }

    /// Releases running instances idle for at least the idle timeout.
    pub fn idle_reaper_tick(&mut self) -> Vec<InstanceId> {
        let now = self.now;
        let timeout = self.config.idle_timeout;
        let idle: Vec<InstanceId> = self
            .instances
            .values()
            .filter(|i| i.state == InstanceState::Running && i.in_flight == 0 && now.since(i.last_active_at) >= timeout)
            .map(|i| i.id)
            .collect();
        for &id in &idle {
            self.release_now(id);
        }
        idle
    }

    /// Releases `instance` as soon as it is allowed to: immediately when
    /// running, otherwise once it reaches running (or on the next health tick
    /// if it has failed). In-flight tasks are cancelled.
    pub fn release_instance(&mut self, instance: InstanceId) -> Result<(), FabricError> {
        let inst = self.instances.get_mut(&instance).ok_or(FabricError::UnknownInstance(instance))?;
        inst.release_requested = true;
        let running: Vec<u64> = inst.running_tasks.iter().copied().collect();
        let state = inst.state;
        for t in running {
            self.resolve_failed(TaskId(t), TaskError::Cancelled);
        }
        if state == InstanceState::Running {
            self.release_now(instance);
        }
        self.audit();
        Ok(())
    }

    fn release_now(&mut self, id: InstanceId) {
        let pool = self.pool_of(id);
        self.set_state(id, InstanceState::Released);
        self.free_gpus_of(id);
        self.instances.remove(&id);
        self.stats.releases += 1;
        if let Pool::Dedicated(_) = pool {
            let pending: Vec<TaskId> = self.pools.remove(&pool).map(Vec::from).unwrap_or_default();
            for t in pending {
                self.resolve_failed(t, TaskError::Cancelled);
            }
        }
    }
}

pub use audit::check_output_sequence;

#[cfg(test)]
mod tests;
