//! GPU placement on a cluster's nodes.
//!
//! Requests that fit in one node go to the first node (by id) with enough
//! free GPUs, taking its lowest free indices; this is what lets several small
//! models share a node. Larger requests take whole, completely free nodes.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub const DEFAULT_GPUS_PER_NODE: u32 = 8;
pub const DEFAULT_VRAM_PER_GPU: u64 = 40_000_000_000;

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClusterSpec {
    pub id: String,
    pub nodes: u32,
    pub gpus_per_node: u32,
    pub vram_per_gpu: u64,
}

impl ClusterSpec {
    pub fn new(id: impl Into<String>, nodes: u32) -> Self {
        Self { id: id.into(), nodes, gpus_per_node: DEFAULT_GPUS_PER_NODE, vram_per_gpu: DEFAULT_VRAM_PER_GPU }
    }

    pub fn total_gpus(&self) -> u64 {
        u64::from(self.nodes) * u64::from(self.gpus_per_node)
    }
}

/// One GPU: node index within its cluster and GPU index within the node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GpuRef {
    pub node: u32,
    pub gpu: u32,
}

/// Whoever holds a GPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Holder {
    Instance(u64),
    /// A job from another tenant of the cluster.
    External(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: u32,
    slots: Vec<Option<Holder>>,
}

impl Node {
    fn new(id: u32, gpus: u32) -> Self {
        Self { id, slots: alloc::vec![None; gpus as usize] }
    }

    pub fn gpu_count(&self) -> u32 {
        self.slots.len() as u32
    }

    pub fn gpu_free(&self) -> Vec<u32> {
        self.slots.iter().enumerate().filter(|(_, s)| s.is_none()).map(|(i, _)| i as u32).collect()
    }

    pub fn free_count(&self) -> u32 {
        self.slots.iter().filter(|s| s.is_none()).count() as u32
    }

    pub fn is_free(&self) -> bool {
        self.slots.iter().all(Option::is_none)
    }

    pub fn holder(&self, gpu: u32) -> Option<Holder> {
        self.slots.get(gpu as usize).copied().flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlacementError {
    /// Not enough free GPUs right now; the job should wait.
    InsufficientResources { requested: u32 },
    /// The request can never be satisfied on this cluster.
    TooLarge { requested: u32, capacity: u64 },
}

impl fmt::Display for PlacementError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InsufficientResources { requested } => write!(f, "{requested} GPUs are not free"),
            Self::TooLarge { requested, capacity } => {
                write!(f, "{requested} GPUs requested but the cluster only has {capacity}")
            }
        }
    }
}

impl core::error::Error for PlacementError {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterNodes {
    pub spec: ClusterSpec,
    nodes: Vec<Node>,
    free_gpus: u64,
}

impl ClusterNodes {
    pub fn new(spec: ClusterSpec) -> Self {
        let nodes = (0..spec.nodes).map(|i| Node::new(i, spec.gpus_per_node)).collect();
        let free_gpus = spec.total_gpus();
        Self { spec, nodes, free_gpus }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn free_nodes(&self) -> u32 {
        self.nodes.iter().filter(|n| n.is_free()).count() as u32
    }

    pub fn free_gpus(&self) -> u64 {
        self.free_gpus
    }

    /// GPUs a request for `gpus` would actually occupy.
    pub fn footprint(&self, gpus: u32) -> u32 {
        let per = self.spec.gpus_per_node;
        if gpus <= per {
            gpus
        } else {
            gpus.div_ceil(per) * per
        }
    }

    /// Finds a placement without applying it.
    pub fn find(&self, gpus: u32) -> Result<Vec<GpuRef>, PlacementError> {
        let per = self.spec.gpus_per_node;
        if gpus == 0 || u64::from(self.footprint(gpus)) > self.spec.total_gpus() || per == 0 {
            return Err(PlacementError::TooLarge { requested: gpus, capacity: self.spec.total_gpus() });
        }
        if gpus <= per {
            let node = self
                .nodes
                .iter()
                .find(|n| n.free_count() >= gpus)
                .ok_or(PlacementError::InsufficientResources { requested: gpus })?;
            Ok(node.gpu_free().into_iter().take(gpus as usize).map(|gpu| GpuRef { node: node.id, gpu }).collect())
        } else {
            let whole = gpus.div_ceil(per) as usize;
            let chosen: Vec<&Node> = self.nodes.iter().filter(|n| n.is_free()).take(whole).collect();
            if chosen.len() < whole {
                return Err(PlacementError::InsufficientResources { requested: gpus });
            }
            Ok(chosen.iter().flat_map(|n| (0..per).map(move |gpu| GpuRef { node: n.id, gpu })).collect())
        }
    }

    /// First-fit allocation; on success the returned GPUs belong to `holder`.
    pub fn allocate(&mut self, gpus: u32, holder: Holder) -> Result<Vec<GpuRef>, PlacementError> {
        let placement = self.find(gpus)?;
        for g in &placement {
            self.nodes[g.node as usize].slots[g.gpu as usize] = Some(holder);
        }
        self.free_gpus -= placement.len() as u64;
        Ok(placement)
    }

    /// Returns GPUs to the free pool. GPUs not held by `holder` are left alone.
    pub fn release(&mut self, gpus: &[GpuRef], holder: Holder) -> usize {
        let mut freed = 0;
        for g in gpus {
            if let Some(slot) = self.nodes.get_mut(g.node as usize).and_then(|n| n.slots.get_mut(g.gpu as usize)) {
                if *slot == Some(holder) {
                    *slot = None;
                    freed += 1;
                }
            }
        }
        self.free_gpus += freed as u64;
        freed
    }

    /// Every GPU either free or held, and the running free count agrees with a recount.
    pub fn check_conservation(&self) -> Result<(), &'static str> {
        let recount: u64 = self.nodes.iter().map(|n| u64::from(n.free_count())).sum();
        if recount != self.free_gpus {
            return Err("free GPU counter disagrees with node slots");
        }
        let busy_nodes = self.nodes.iter().filter(|n| !n.is_free()).count() as u32;
        if busy_nodes + self.free_nodes() != self.spec.nodes {
            return Err("allocated + free nodes != total nodes");
        }
        if self.nodes.iter().any(|n| n.gpu_count() != self.spec.gpus_per_node) {
            return Err("node GPU count changed");
        }
        Ok(())
    }

    /// Every GPU currently held by `holder`.
    pub fn held_by(&self, holder: Holder) -> Vec<GpuRef> {
        let mut out = Vec::new();
        for n in &self.nodes {
            for (i, s) in n.slots.iter().enumerate() {
                if *s == Some(holder) {
                    out.push(GpuRef { node: n.id, gpu: i as u32 });
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cluster(nodes: u32) -> ClusterNodes {
        ClusterNodes::new(ClusterSpec::new("c", nodes))
    }

    #[test]
    fn colocation_fills_one_node() {
        let mut c = cluster(2);
        let big = c.allocate(6, Holder::Instance(1)).unwrap();
        let a = c.allocate(1, Holder::Instance(2)).unwrap();
        let b = c.allocate(1, Holder::Instance(3)).unwrap();
        assert!(big.iter().chain(&a).chain(&b).all(|g| g.node == 0));
        assert_eq!(c.nodes()[0].free_count(), 0);
        assert_eq!(c.free_nodes(), 1);
        assert_eq!(a, [GpuRef { node: 0, gpu: 6 }]);
    }

    #[test]
    fn sixteen_gpus_take_two_whole_nodes() {
        let mut c = cluster(3);
        let got = c.allocate(16, Holder::Instance(1)).unwrap();
        assert_eq!(got.len(), 16);
        assert_eq!(c.free_nodes(), 1);
        assert!(got.iter().all(|g| g.node < 2));
    }

    #[test]
    fn multi_node_skips_partially_used_nodes() {
        let mut c = cluster(4);
        c.allocate(1, Holder::Instance(1)).unwrap();
        let got = c.allocate(12, Holder::Instance(2)).unwrap();
        let mut nodes: Vec<u32> = got.iter().map(|g| g.node).collect();
        nodes.dedup();
        assert_eq!(nodes, [1, 2]);
    }

    #[test]
    fn insufficient_and_too_large() {
        let mut c = cluster(1);
        c.allocate(5, Holder::Instance(1)).unwrap();
        assert_eq!(c.find(4), Err(PlacementError::InsufficientResources { requested: 4 }));
        assert!(matches!(c.find(9), Err(PlacementError::TooLarge { .. })));
        assert!(matches!(c.find(0), Err(PlacementError::TooLarge { .. })));
    }

    #[test]
    fn release_restores_everything() {
        let mut c = cluster(2);
        let g = c.allocate(10, Holder::Instance(9)).unwrap();
        assert_eq!(c.free_gpus(), 0);
        assert_eq!(c.release(&g, Holder::Instance(8)), 0);
        assert_eq!(c.release(&g, Holder::Instance(9)), 16);
        assert_eq!(c.free_nodes(), 2);
        c.check_conservation().unwrap();
    }
}
