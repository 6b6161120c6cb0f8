//! Invariant checks, used by tests and by audit mode.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{Fabric, Output, TaskId};
use crate::instance::{InstanceId, InstanceState};
use crate::placement::{GpuRef, Holder};

impl Fabric {
    /// GPU conservation, holder bookkeeping and per-instance limits.
    pub fn check_invariants(&self) -> Result<(), Vec<String>> {
        let mut errors = Vec::new();
        let mut held: BTreeMap<u64, Vec<GpuRef>> = BTreeMap::new();
        for c in &self.clusters {
            if let Err(e) = c.nodes.check_conservation() {
                errors.push(format!("cluster {}: {e}", c.nodes.spec.id));
            }
            for n in c.nodes.nodes() {
                for gpu in 0..n.gpu_count() {
                    if let Some(Holder::Instance(id)) = n.holder(gpu) {
                        held.entry(id).or_default().push(GpuRef { node: n.id, gpu });
                    }
                }
            }
        }
        for inst in self.instances.values() {
            let mut mine = inst.gpus.clone();
            mine.sort();
            let mut theirs = held.remove(&inst.id.0).unwrap_or_default();
            theirs.sort();
            if mine != theirs {
                errors.push(format!("{}: GPU list disagrees with node slots", inst.id));
            }
            if inst.in_flight > inst.max_parallel {
                errors.push(format!("{}: in_flight {} > max {}", inst.id, inst.in_flight, inst.max_parallel));
            }
            if inst.in_flight as usize != inst.running_tasks.len() {
                errors.push(format!("{}: in_flight counter drifted", inst.id));
            }
            match inst.state {
                InstanceState::Running | InstanceState::Starting if inst.gpus.is_empty() => {
                    errors.push(format!("{}: {} without GPUs", inst.id, inst.state));
                }
                InstanceState::Queued | InstanceState::Failed if !inst.gpus.is_empty() => {
                    errors.push(format!("{}: {} but holding GPUs", inst.id, inst.state));
                }
                _ => {}
            }
            if inst.state != InstanceState::Running && inst.in_flight > 0 {
                errors.push(format!("{}: tasks running on a {} instance", inst.id, inst.state));
            }
            for t in &inst.running_tasks {
                if self.tasks.get(&TaskId(*t)).and_then(|t| t.instance) != Some(inst.id) {
                    errors.push(format!("{}: runs task-{t} that does not point back", inst.id));
                }
            }
        }
        for (id, _) in held {
            errors.push(format!("GPUs held by unknown {}", InstanceId(id)));
        }
        let mut places: BTreeMap<TaskId, usize> = BTreeMap::new();
        for (pool, queue) in &self.pools {
            for id in queue {
                *places.entry(*id).or_default() += 1;
                if self.tasks.get(id).map(|t| &t.pool) != Some(pool) {
                    errors.push(format!("{id}: queued in a foreign pool"));
                }
            }
        }
        for inst in self.instances.values() {
            for t in &inst.orphans {
                *places.entry(TaskId(*t)).or_default() += 1;
            }
        }
        for (id, task) in &self.tasks {
            let n = places.remove(id).unwrap_or(0) + usize::from(task.instance.is_some());
            if n != 1 {
                errors.push(format!("{id}: tracked in {n} places"));
            }
        }
        for id in places.keys() {
            errors.push(format!("{id}: queued but unknown"));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }
}

/// Checks an output log: every instance transition is legal, every task
/// resolves at most once and nothing about a task follows its resolution.
pub fn check_output_sequence(outputs: &[Output]) -> Result<(), String> {
    let mut states: BTreeMap<InstanceId, InstanceState> = BTreeMap::new();
    let mut resolved: BTreeSet<TaskId> = BTreeSet::new();
    for (i, o) in outputs.iter().enumerate() {
        match o {
            Output::InstanceChanged { instance, from, to, .. } => {
                let known = states.get(instance).copied();
                if known != *from {
                    return Err(format!("#{i}: {instance} reported from {from:?}, was {known:?}"));
                }
                if let Some(f) = from {
                    if !f.can_transition_to(*to) {
                        return Err(format!("#{i}: illegal {f} -> {to} on {instance}"));
                    }
                }
                states.insert(*instance, *to);
            }
            Output::Started { task, .. } | Output::Token { task, .. } | Output::ExecuteExternal { task, .. } => {
                if resolved.contains(task) {
                    return Err(format!("#{i}: {task} active after resolution"));
                }
            }
            Output::Completed { task, .. } | Output::Failed { task, .. } => {
                if !resolved.insert(*task) {
                    return Err(format!("#{i}: {task} resolved twice"));
                }
            }
        }
    }
    Ok(())
}
