//! GPU placement against a brute-force first-fit model.

use fedinfer_core::placement::{ClusterNodes, ClusterSpec, GpuRef, Holder, PlacementError};
use proptest::prelude::*;

/// Flat table of slot owners, searched exhaustively.
struct Reference {
    per: u32,
    slots: Vec<Vec<Option<u64>>>,
}

impl Reference {
    fn new(nodes: u32, per: u32) -> Self {
        Self { per, slots: vec![vec![None; per as usize]; nodes as usize] }
    }

    fn allocate(&mut self, gpus: u32, owner: u64) -> Option<Vec<GpuRef>> {
        let mut picked = Vec::new();
        if gpus <= self.per {
            for (n, node) in self.slots.iter().enumerate() {
                let free: Vec<usize> = (0..node.len()).filter(|&g| node[g].is_none()).collect();
                if free.len() >= gpus as usize {
                    picked = free[..gpus as usize].iter().map(|&g| GpuRef { node: n as u32, gpu: g as u32 }).collect();
                    break;
                }
            }
        } else {
            let whole = ((gpus + self.per - 1) / self.per) as usize;
            let empty: Vec<usize> =
                (0..self.slots.len()).filter(|&n| self.slots[n].iter().all(Option::is_none)).collect();
            if empty.len() >= whole {
                for &n in &empty[..whole] {
                    for g in 0..self.per {
                        picked.push(GpuRef { node: n as u32, gpu: g });
                    }
                }
            }
        }
        if picked.is_empty() {
            return None;
        }
        for p in &picked {
            self.slots[p.node as usize][p.gpu as usize] = Some(owner);
        }
        Some(picked)
    }

    fn release(&mut self, owner: u64) {
        for node in &mut self.slots {
            for s in node.iter_mut() {
                if *s == Some(owner) {
                    *s = None;
                }
            }
        }
    }

    fn free_nodes(&self) -> u32 {
        self.slots.iter().filter(|n| n.iter().all(Option::is_none)).count() as u32
    }
}

#[derive(Debug, Clone)]
enum Op {
    Alloc(u32),
    /// Release the k-th live holder.
    Free(usize),
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(
        prop_oneof![3 => (1u32..=20).prop_map(Op::Alloc), 1 => any::<usize>().prop_map(Op::Free)],
        1..80,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn identical_placements(nodes in 1u32..8, per in prop::sample::select(vec![4u32, 8]), ops in ops()) {
        let mut real = ClusterNodes::new(ClusterSpec { gpus_per_node: per, ..ClusterSpec::new("c", nodes) });
        let mut reference = Reference::new(nodes, per);
        let mut live: Vec<(u64, Vec<GpuRef>)> = Vec::new();
        for (owner, op) in ops.into_iter().enumerate() {
            let owner = owner as u64;
            match op {
                Op::Alloc(g) => {
                    let expected = reference.allocate(g, owner);
                    match real.allocate(g, Holder::Instance(owner)) {
                        Ok(got) => {
                            prop_assert_eq!(Some(got.clone()), expected);
                            live.push((owner, got));
                        }
                        Err(PlacementError::InsufficientResources { .. }) => prop_assert!(expected.is_none()),
                        Err(PlacementError::TooLarge { .. }) => {
                            prop_assert!(expected.is_none());
                            prop_assert!(u64::from(g.div_ceil(per) * per) > u64::from(nodes * per) || g > nodes * per);
                        }
                    }
                }
                Op::Free(k) if !live.is_empty() => {
                    let (owner, gpus) = live.remove(k % live.len());
                    prop_assert_eq!(real.release(&gpus, Holder::Instance(owner)), gpus.len());
                    reference.release(owner);
                }
                Op::Free(_) => {}
            }
            prop_assert!(real.check_conservation().is_ok());
            prop_assert_eq!(real.free_nodes(), reference.free_nodes());
            let held: u64 = live.iter().map(|(_, g)| g.len() as u64).sum();
            prop_assert_eq!(real.free_gpus() + held, u64::from(nodes * per));
        }
    }
}

#[test]
fn seventy_b_then_two_small_models_share_a_node() {
    let mut c = ClusterNodes::new(ClusterSpec::new("c", 2));
    let big = c.allocate(6, Holder::Instance(1)).unwrap();
    let a = c.allocate(1, Holder::Instance(2)).unwrap();
    let b = c.allocate(1, Holder::Instance(3)).unwrap();
    assert!(big.iter().chain(&a).chain(&b).all(|g| g.node == 0));
    assert_eq!(c.free_nodes(), 1);
}
