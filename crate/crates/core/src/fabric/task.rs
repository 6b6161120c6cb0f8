use alloc::string::String;
use core::fmt;

use crate::instance::{InstanceId, InstanceState, Lifecycle};
use crate::registry::ModelKind;
use crate::time::{SimDuration, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(transparent))]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "task-{}", self.0)
    }
}

/// What the fabric needs to know about one inference request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub model: String,
    /// Pre-registered function to invoke on the endpoint.
    pub function: String,
    pub kind: ModelKind,
    pub prompt_tokens: u32,
    /// Tokens to generate, or vectors to compute for embeddings.
    pub output_units: u32,
    /// Emit one [`Output::Token`] per generated token.
    pub stream: bool,
}

impl TaskSpec {
    pub fn generation(model: impl Into<String>, prompt_tokens: u32, output_tokens: u32) -> Self {
        Self {
            model: model.into(),
            function: String::from(crate::registry::DEFAULT_FUNCTION),
            kind: ModelKind::Generation,
            prompt_tokens,
            output_units: output_tokens,
            stream: false,
        }
    }

    pub fn streaming(mut self) -> Self {
        self.stream = true;
        self
    }
}

/// Where a queued task may run.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pool {
    /// Any online instance of the model on the endpoint.
    Online { model: String, endpoint: String },
    /// Only this instance (batch jobs).
    Dedicated(InstanceId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskError {
    /// Every allowed attempt died with its instance.
    Failed {
        attempts: u32,
    },
    /// The model's weights do not fit on the GPUs it was given.
    InsufficientVram,
    UnregisteredFunction,
    Cancelled,
    /// Error reported by an external (passthrough) backend; not retried.
    External {
        status: Option<u16>,
        message: String,
    },
}

impl fmt::Display for TaskError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Failed { attempts } => write!(f, "task failed after {attempts} attempts"),
            Self::InsufficientVram => f.write_str("model weights do not fit in the allocated GPU memory"),
            Self::UnregisteredFunction => f.write_str("function is not registered on the endpoint"),
            Self::Cancelled => f.write_str("task cancelled"),
            Self::External { status: Some(s), message } => write!(f, "upstream returned {s}: {message}"),
            Self::External { status: None, message } => write!(f, "upstream unavailable: {message}"),
        }
    }
}

/// Breakdown of the time a task spent waiting for a cold instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ColdStart {
    /// Waiting in the scheduler queue for nodes.
    pub queue_wait: SimDuration,
    /// From the scheduler decision until the nodes were usable.
    pub allocation: SimDuration,
    /// Weight loading.
    pub load: SimDuration,
}

impl ColdStart {
    pub fn total(&self) -> SimDuration {
        self.queue_wait + self.allocation + self.load
    }

    /// The part of `lifecycle` that overlaps a wait beginning at `waiting_since`.
    pub(crate) fn observed(lifecycle: &Lifecycle, waiting_since: SimTime) -> Option<Self> {
        let running = lifecycle.running_at?;
        if waiting_since >= running {
            return None;
        }
        let allocated = lifecycle.allocated_at.unwrap_or(running);
        let loading = lifecycle.loading_at.unwrap_or(running);
        let clip = |t: SimTime| if t < waiting_since { waiting_since } else { t };
        let queued = clip(lifecycle.queued_at);
        let allocated = clip(allocated);
        let loading = clip(loading);
        Some(Self { queue_wait: allocated - queued, allocation: loading - allocated, load: running - loading })
    }
}

/// Timing of a finished task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskReport {
    pub instance: InstanceId,
    pub endpoint: String,
    pub submitted_at: SimTime,
    pub started_at: SimTime,
    pub finished_at: SimTime,
    pub attempts: u32,
    /// Tokens (or vectors) produced.
    pub units: u32,
    pub cold: Option<ColdStart>,
}

impl TaskReport {
    pub fn latency(&self) -> SimDuration {
        self.finished_at - self.submitted_at
    }

    pub fn service_time(&self) -> SimDuration {
        self.finished_at - self.started_at
    }

    /// Waiting that was not cold start: queueing for a free slot, or time lost
    /// to failed attempts.
    pub fn slot_wait(&self) -> SimDuration {
        let waited = self.started_at - self.submitted_at;
        let cold = self.cold.map(|c| c.total()).unwrap_or_default();
        SimDuration(waited.0.saturating_sub(cold.0))
    }
}

/// Everything the fabric reports to the outside, in event order.
#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    Started {
        task: TaskId,
        instance: InstanceId,
        attempt: u32,
        at: SimTime,
    },
    /// Token `index` of a streaming task. Indices restart at 0 after a retry.
    Token {
        task: TaskId,
        index: u32,
        at: SimTime,
    },
    Completed {
        task: TaskId,
        at: SimTime,
        report: TaskReport,
    },
    Failed {
        task: TaskId,
        at: SimTime,
        error: TaskError,
    },
    /// An external backend must run this attempt and report back with
    /// [`Fabric::complete_external`](super::Fabric::complete_external).
    ExecuteExternal {
        task: TaskId,
        instance: InstanceId,
        attempt: u32,
    },
    InstanceChanged {
        instance: InstanceId,
        from: Option<InstanceState>,
        to: InstanceState,
        at: SimTime,
    },
}

impl Output {
    /// The task this output resolves, if it is terminal.
    pub fn resolves(&self) -> Option<TaskId> {
        match self {
            Output::Completed { task, .. } | Output::Failed { task, .. } => Some(*task),
            _ => None,
        }
    }
}
