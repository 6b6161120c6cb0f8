//! Endpoint selection for federated requests.
//!
//! Three rules, tried in order:
//!
//! 1. an endpoint that already has an instance of the model running, starting
//!    or queued;
//! 2. an endpoint whose cluster has enough free nodes for one new instance;
//! 3. the first endpoint configured for the model.
//!
//! Ties within rules 1 and 2 go to the lowest configuration index.

use alloc::string::String;
use core::fmt;

use crate::instance::InstanceState;
use crate::registry::Registry;
use crate::time::SimTime;

/// Publicly visible load of one cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClusterStatus {
    pub cluster_id: String,
    pub total_nodes: u32,
    /// Nodes with every GPU unassigned.
    pub free_nodes: u32,
    pub queued_jobs: u32,
    pub gpus_per_node: u32,
    pub observed_at: SimTime,
}

impl ClusterStatus {
    /// Whole nodes one instance needing `gpus` GPUs would occupy.
    pub fn nodes_needed(&self, gpus: u32) -> u32 {
        if self.gpus_per_node == 0 {
            return u32::MAX;
        }
        gpus.div_ceil(self.gpus_per_node)
    }
}

/// The part of an instance that selection looks at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceSummary {
    pub model: String,
    pub endpoint: String,
    pub state: InstanceState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SelectError {
    NoEndpoint(String),
}

impl fmt::Display for SelectError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NoEndpoint(m) => write!(f, "no endpoint is configured for model {m}"),
        }
    }
}

impl core::error::Error for SelectError {}

/// Which rule produced a selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reason {
    Active,
    FreeNodes,
    Default,
}

/// Picks the endpoint for `model`. Pure: the result depends only on the arguments.
pub fn select_endpoint(
    model: &str,
    registry: &Registry,
    instances: &[InstanceSummary],
    clusters: &[ClusterStatus],
) -> Result<String, SelectError> {
    select_with_reason(model, registry, instances, clusters).map(|(ep, _)| ep)
}

pub fn select_with_reason(
    model: &str,
    registry: &Registry,
    instances: &[InstanceSummary],
    clusters: &[ClusterStatus],
) -> Result<(String, Reason), SelectError> {
    let entry = registry.entry(model).ok_or_else(|| SelectError::NoEndpoint(String::from(model)))?;
    // Routes are stored in config_index order, so the first hit wins ties.
    let routes = &entry.routes;
    let first = routes.first().ok_or_else(|| SelectError::NoEndpoint(String::from(model)))?;

    let active = routes.iter().find(|route| {
        instances.iter().any(|i| i.model == model && i.endpoint == route.endpoint && i.state.is_active())
    });
    if let Some(route) = active {
        return Ok((route.endpoint.clone(), Reason::Active));
    }

    let with_room = routes.iter().find(|route| {
        let Some(endpoint) = registry.endpoint(&route.endpoint) else {
            return false;
        };
        clusters
            .iter()
            .find(|c| c.cluster_id == endpoint.cluster)
            .is_some_and(|c| c.free_nodes >= c.nodes_needed(entry.spec.gpus_required))
    });
    if let Some(route) = with_room {
        return Ok((route.endpoint.clone(), Reason::FreeNodes));
    }

    Ok((first.endpoint.clone(), Reason::Default))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{BackendProfile, EndpointSpec, ModelSpec};
    use alloc::vec;
    use alloc::vec::Vec;

    fn two_endpoints() -> Registry {
        let mut r = Registry::new();
        r.register_endpoint(EndpointSpec::new("A", "ca", 4, 16)).unwrap();
        r.register_endpoint(EndpointSpec::new("B", "cb", 4, 16)).unwrap();
        r.register_model(ModelSpec::generation("m", 70.0, 8, BackendProfile::mock(1.0)), &["A", "B"]).unwrap();
        r
    }

    fn status(id: &str, free: u32) -> ClusterStatus {
        ClusterStatus {
            cluster_id: id.into(),
            total_nodes: 24,
            free_nodes: free,
            queued_jobs: 0,
            gpus_per_node: 8,
            observed_at: SimTime::ZERO,
        }
    }

    fn running(ep: &str) -> InstanceSummary {
        InstanceSummary { model: "m".into(), endpoint: ep.into(), state: InstanceState::Running }
    }

    #[test]
    fn running_instance_beats_free_nodes() {
        let r = two_endpoints();
        let got = select_endpoint("m", &r, &[running("B")], &[status("ca", 5), status("cb", 0)]).unwrap();
        assert_eq!(got, "B");
    }

    #[test]
    fn free_nodes_when_nothing_runs() {
        let r = two_endpoints();
        let got = select_endpoint("m", &r, &[], &[status("ca", 0), status("cb", 2)]).unwrap();
        assert_eq!(got, "B");
    }

    #[test]
    fn defaults_to_first_configured() {
        let r = two_endpoints();
        let got = select_with_reason("m", &r, &[], &[status("ca", 0), status("cb", 0)]).unwrap();
        assert_eq!(got, ("A".into(), Reason::Default));
    }

    #[test]
    fn queued_and_starting_count_as_active() {
        let r = two_endpoints();
        for state in [InstanceState::Queued, InstanceState::Starting] {
            let inst = InstanceSummary { state, ..running("B") };
            assert_eq!(select_endpoint("m", &r, &[inst], &[status("ca", 9)]).unwrap(), "B");
        }
        let failed = InstanceSummary { state: InstanceState::Failed, ..running("B") };
        assert_eq!(select_endpoint("m", &r, &[failed], &[status("ca", 9)]).unwrap(), "A");
    }

    #[test]
    fn multi_node_models_need_enough_free_nodes() {
        let mut r = Registry::new();
        r.register_endpoint(EndpointSpec::new("A", "ca", 1, 1)).unwrap();
        r.register_endpoint(EndpointSpec::new("B", "cb", 1, 1)).unwrap();
        r.register_model(ModelSpec::generation("big", 405.0, 24, BackendProfile::mock(1.0)), &["A", "B"]).unwrap();
        let got = select_endpoint("big", &r, &[], &[status("ca", 2), status("cb", 3)]).unwrap();
        assert_eq!(got, "B");
    }

    #[test]
    fn single_endpoint_always_selected() {
        let mut r = Registry::new();
        r.register_endpoint(EndpointSpec::new("only", "c", 1, 1)).unwrap();
        r.register_model(ModelSpec::generation("m", 8.0, 1, BackendProfile::mock(1.0)), &["only"]).unwrap();
        let states: Vec<Vec<InstanceSummary>> = vec![
            vec![],
            vec![InstanceSummary { model: "m".into(), endpoint: "only".into(), state: InstanceState::Running }],
        ];
        for inst in &states {
            for free in [0, 3] {
                assert_eq!(select_endpoint("m", &r, inst, &[status("c", free)]).unwrap(), "only");
            }
        }
    }

    #[test]
    fn unknown_model() {
        let r = two_endpoints();
        assert_eq!(select_endpoint("x", &r, &[], &[]), Err(SelectError::NoEndpoint("x".into())));
    }
}
