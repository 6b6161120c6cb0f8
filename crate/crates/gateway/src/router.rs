//! Endpoint selection against live instance state and cached cluster probes.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use fedinfer_core::select::{select_with_reason, Reason};
use fedinfer_core::{ClusterStatus, Fabric, FabricError, SimDuration, SimTime};
use parking_lot::Mutex;

use crate::driver::DispatchError;

/// Cluster status, refreshed at most once per probe interval.
pub struct ProbeCache {
    interval: SimDuration,
    cached: Mutex<Option<(SimTime, Vec<ClusterStatus>)>>,
    queries: AtomicU64,
}

impl ProbeCache {
    pub fn new(interval: SimDuration) -> Self {
        Self { interval, cached: Mutex::new(None), queries: AtomicU64::new(0) }
    }

    /// Times the fabric was actually asked.
    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    pub fn statuses(&self, fabric: &Fabric) -> Vec<ClusterStatus> {
        let now = fabric.now();
        let mut cached = self.cached.lock();
        if let Some((at, statuses)) = cached.as_ref() {
            if now.since(*at) < self.interval {
                return statuses.clone();
            }
        }
        self.queries.fetch_add(1, Ordering::Relaxed);
        let fresh = fabric.cluster_statuses();
        *cached = Some((now, fresh.clone()));
        fresh
    }

    pub fn probe(&self, fabric: &Fabric, cluster: &str) -> Result<ClusterStatus, FabricError> {
        self.statuses(fabric)
            .into_iter()
            .find(|s| s.cluster_id == cluster)
            .ok_or_else(|| FabricError::UnknownCluster(cluster.to_string()))
    }
}

/// How often each endpoint and rule was chosen.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct RouteCounts {
    pub by_endpoint: BTreeMap<String, u64>,
    pub active: u64,
    pub free_nodes: u64,
    pub default: u64,
}

pub struct Federation {
    pub probes: ProbeCache,
    counts: Mutex<RouteCounts>,
}

impl Federation {
    pub fn new(probe_interval: SimDuration) -> Self {
        Self { probes: ProbeCache::new(probe_interval), counts: Mutex::new(RouteCounts::default()) }
    }

    /// Chooses the endpoint for an online request. Instance state is read
    /// live; cluster status comes from the probe cache.
    pub fn choose(&self, fabric: &Fabric, model: &str) -> Result<String, DispatchError> {
        let clusters = self.probes.statuses(fabric);
        let instances = fabric.summaries();
        let (endpoint, reason) = select_with_reason(model, fabric.registry(), &instances, &clusters)
            .map_err(|_| DispatchError::Fabric(FabricError::UnknownModel(model.to_string())))?;
        let mut counts = self.counts.lock();
        *counts.by_endpoint.entry(endpoint.clone()).or_default() += 1;
        match reason {
            Reason::Active => counts.active += 1,
            Reason::FreeNodes => counts.free_nodes += 1,
            Reason::Default => counts.default += 1,
        }
        Ok(endpoint)
    }

    /// Chooses an endpoint for a dedicated (batch) instance: existing online
    /// instances do not attract it.
    pub fn choose_dedicated(&self, fabric: &Fabric, model: &str) -> Result<String, DispatchError> {
        let clusters = self.probes.statuses(fabric);
        select_with_reason(model, fabric.registry(), &[], &clusters)
            .map(|(e, _)| e)
            .map_err(|_| DispatchError::Fabric(FabricError::UnknownModel(model.to_string())))
    }

    pub fn counts(&self) -> RouteCounts {
        self.counts.lock().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedinfer_core::registry::BackendProfile;
    use fedinfer_core::{ClusterSpec, EndpointSpec, FabricConfig, ModelSpec, TaskSpec};

    #[test]
    fn probes_are_cached_for_the_interval() {
        let mut fabric = Fabric::new(FabricConfig::default(), [ClusterSpec::new("sophia", 24)]);
        let cache = ProbeCache::new(SimDuration::from_secs(2));
        assert_eq!(cache.probe(&fabric, "sophia").unwrap().free_nodes, 24);
        fabric.advance_to(SimTime::from_secs(1));
        cache.probe(&fabric, "sophia").unwrap();
        assert_eq!(cache.queries(), 1);
        fabric.advance_to(SimTime::from_secs(2));
        cache.probe(&fabric, "sophia").unwrap();
        assert_eq!(cache.queries(), 2);
        assert!(cache.probe(&fabric, "nowhere").is_err());
    }

    #[test]
    fn one_node_instance_takes_one_node() {
        let mut fabric = Fabric::new(FabricConfig::default(), [ClusterSpec::new("sophia", 24)]);
        fabric.register_endpoint(EndpointSpec::new("e", "sophia", 4, 16)).unwrap();
        fabric.register_model(ModelSpec::generation("m", 8.0, 1, BackendProfile::mock(100.0)), &["e"]).unwrap();
        fabric.submit(TaskSpec::generation("m", 1, 1), "e").unwrap();
        fabric.advance_to(SimTime::from_secs(30));
        let cache = ProbeCache::new(SimDuration::from_secs(2));
        assert_eq!(cache.probe(&fabric, "sophia").unwrap().free_nodes, 23);
    }

    #[test]
    fn affinity_follows_running_instance() {
        let mut fabric = Fabric::new(FabricConfig::default(), [ClusterSpec::new("a", 0), ClusterSpec::new("b", 4)]);
        fabric.register_endpoint(EndpointSpec::new("A", "a", 4, 16)).unwrap();
        fabric.register_endpoint(EndpointSpec::new("B", "b", 4, 16)).unwrap();
        fabric.register_model(ModelSpec::generation("m", 8.0, 1, BackendProfile::mock(100.0)), &["A", "B"]).unwrap();
        let fed = Federation::new(SimDuration::from_secs(2));
        assert_eq!(fed.choose(&fabric, "m").unwrap(), "B");
        fabric.submit(TaskSpec::generation("m", 1, 1), "B").unwrap();
        for _ in 0..10 {
            assert_eq!(fed.choose(&fabric, "m").unwrap(), "B");
        }
        let c = fed.counts();
        assert_eq!((c.free_nodes, c.active), (1, 10));
        assert!(fed.choose(&fabric, "nope").is_err());
    }
}
