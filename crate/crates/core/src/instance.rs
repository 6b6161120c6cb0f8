//! Lifecycle of one deployed copy of a model.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::placement::GpuRef;
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(transparent))]
pub struct InstanceId(pub u64);

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "inst-{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "lowercase"))]
pub enum InstanceState {
    /// Waiting in the scheduler queue for nodes.
    Queued,
    /// Nodes acquired, weights loading.
    Starting,
    Running,
    Released,
    Failed,
}

impl InstanceState {
    /// Legal moves: queued → starting → running → released, anything → failed,
    /// failed → queued.
    pub fn can_transition_to(self, next: InstanceState) -> bool {
        use InstanceState::*;
        matches!((self, next), (Queued, Starting) | (Starting, Running) | (Running, Released) | (Failed, Queued))
            || (next == Failed && self != Failed && self != Released)
    }

    /// States that count as "running or queued" for routing affinity.
    pub fn is_active(self) -> bool {
        matches!(self, InstanceState::Queued | InstanceState::Starting | InstanceState::Running)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InstanceState::Queued => "queued",
            InstanceState::Starting => "starting",
            InstanceState::Running => "running",
            InstanceState::Released => "released",
            InstanceState::Failed => "failed",
        }
    }
}

impl fmt::Display for InstanceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureCause {
    Injected,
    InsufficientVram,
}

impl FailureCause {
    /// Whether a restart can help.
    pub fn is_recoverable(self) -> bool {
        matches!(self, FailureCause::Injected)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IllegalTransition {
    pub instance: InstanceId,
    pub from: InstanceState,
    pub to: InstanceState,
}

impl fmt::Display for IllegalTransition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: illegal transition {} -> {}", self.instance, self.from, self.to)
    }
}

/// Timestamps of the most recent cold start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Lifecycle {
    /// Allocation job submitted.
    pub queued_at: SimTime,
    /// Scheduler granted nodes.
    pub allocated_at: Option<SimTime>,
    /// Nodes ready, weight loading began.
    pub loading_at: Option<SimTime>,
    pub running_at: Option<SimTime>,
}

#[derive(Debug, Clone)]
pub struct ModelInstance {
    pub id: InstanceId,
    pub model: String,
    pub endpoint: String,
    pub cluster: String,
    pub state: InstanceState,
    pub gpus: Vec<GpuRef>,
    pub in_flight: u32,
    pub max_parallel: u32,
    pub created_at: SimTime,
    pub last_active_at: SimTime,
    pub lifecycle: Lifecycle,
    /// Set for instances dedicated to one batch job; they never take online work.
    pub dedicated_to: Option<u64>,
    pub release_requested: bool,
    pub failure: Option<FailureCause>,
    pub restarts: u32,
    /// Bumped on every failure so stale timer events can be told apart.
    pub epoch: u32,
    pub(crate) running_tasks: BTreeSet<u64>,
    pub(crate) orphans: Vec<u64>,
}

impl ModelInstance {
    pub(crate) fn new(
        id: InstanceId,
        model: String,
        endpoint: String,
        cluster: String,
        max_parallel: u32,
        now: SimTime,
        dedicated_to: Option<u64>,
    ) -> Self {
        Self {
            id,
            model,
            endpoint,
            cluster,
            state: InstanceState::Queued,
            gpus: Vec::new(),
            in_flight: 0,
            max_parallel,
            created_at: now,
            last_active_at: now,
            lifecycle: Lifecycle { queued_at: now, ..Lifecycle::default() },
            dedicated_to,
            release_requested: false,
            failure: None,
            restarts: 0,
            epoch: 0,
            running_tasks: BTreeSet::new(),
            orphans: Vec::new(),
        }
    }

    pub fn has_spare_slot(&self) -> bool {
        self.state == InstanceState::Running && self.in_flight < self.max_parallel
    }

    pub fn is_saturated(&self) -> bool {
        self.state == InstanceState::Running && self.in_flight >= self.max_parallel
    }

    /// Node names the instance occupies, in order, without repeats.
    pub fn nodes(&self) -> Vec<u32> {
        let mut nodes: Vec<u32> = self.gpus.iter().map(|g| g.node).collect();
        nodes.dedup();
        nodes
    }

    pub(crate) fn transition(&mut self, to: InstanceState) -> Result<(), IllegalTransition> {
        if !self.state.can_transition_to(to) {
            return Err(IllegalTransition { instance: self.id, from: self.state, to });
        }
        self.state = to;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use InstanceState::*;

    const ALL: [InstanceState; 5] = [Queued, Starting, Running, Released, Failed];

    #[test]
    fn transition_table() {
        let legal = [
            (Queued, Starting),
            (Starting, Running),
            (Running, Released),
            (Queued, Failed),
            (Starting, Failed),
            (Running, Failed),
            (Failed, Queued),
        ];
        for from in ALL {
            for to in ALL {
                assert_eq!(from.can_transition_to(to), legal.contains(&(from, to)), "{from} -> {to}");
            }
        }
    }

    #[test]
    fn illegal_transition_is_refused() {
        let mut inst = ModelInstance::new(InstanceId(1), "m".into(), "e".into(), "c".into(), 4, SimTime::ZERO, None);
        assert!(inst.transition(Running).is_err());
        assert_eq!(inst.state, Queued);
        inst.transition(Starting).unwrap();
        inst.transition(Running).unwrap();
        inst.transition(Released).unwrap();
        assert!(inst.transition(Failed).is_err());
    }
}
