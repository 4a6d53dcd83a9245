//! Minimal NICE-style comparator.
//!
//! Members join one by one in id order through the usual layered join, so
//! the hierarchy depends on closeness only. Data leaves every node one copy
//! at a time: the forwarding order is a single chain through the NICE
//! forwarding tree, children visited nearest first.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::membership::{plan_join, ClusterBounds, Hierarchy, MembershipError};
use crate::resources::{Address, NodeId, NodeProfile};
use crate::tree::OverlayTree;
use crate::underlay::{DelayMatrix, UnderlayTopology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BaselineConfig {
    pub bounds: ClusterBounds,
}

impl BaselineConfig {
    /// Copies a node sends per source packet at any instant.
    pub const fn send_capacity(&self) -> u32 {
        1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaselineOverlay {
    hierarchy: Hierarchy,
    lan_of: BTreeMap<NodeId, Address>,
}

/// Joins `members` one at a time in id order.
pub fn join_sequentially(
    members: impl IntoIterator<Item = NodeId>,
    bounds: ClusterBounds,
    dist: &DelayMatrix,
) -> Result<Hierarchy, MembershipError> {
    let mut ordered: Vec<NodeId> = members.into_iter().collect();
    ordered.sort();
    let mut h = Hierarchy::new(bounds);
    for node in ordered {
        let plan = plan_join(&h, node, dist)?;
        h.insert(node, plan.leader, dist)?;
    }
    Ok(h)
}

pub fn build_baseline_overlay(
    profiles: &[NodeProfile],
    topology: &UnderlayTopology,
    config: BaselineConfig,
) -> Result<BaselineOverlay, MembershipError> {
    let dist = topology.delay_matrix();
    let hierarchy = join_sequentially(profiles.iter().map(|p| p.node), config.bounds, &dist)?;
    let lan_of = profiles.iter().map(|p| (p.node, p.gateway.clone())).collect();
    Ok(BaselineOverlay { hierarchy, lan_of })
}

impl BaselineOverlay {
    pub fn from_hierarchy(hierarchy: Hierarchy, lan_of: BTreeMap<NodeId, Address>) -> Self {
        BaselineOverlay { hierarchy, lan_of }
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    /// NICE forwarding from `source`: a node hands the packet to every other
    /// member of each cluster it belongs to, except the cluster it came from.
    /// Children are listed nearest first.
    pub fn forwarding_tree(&self, source: NodeId, dist: &DelayMatrix) -> BTreeMap<NodeId, Vec<NodeId>> {
        let mut children: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        let mut reached = BTreeSet::from([source]);
        let mut queue = VecDeque::from([(source, None::<(usize, NodeId)>)]);
        while let Some((node, came_from)) = queue.pop_front() {
            let mut next = Vec::new();
            for (layer, cluster) in self.hierarchy.clusters_containing(node).into_iter().enumerate() {
                if came_from == Some((layer, cluster.leader())) {
                    continue;
                }
                for &m in cluster.members() {
                    if reached.insert(m) {
                        next.push((m, (layer, cluster.leader())));
                    }
                }
            }
            next.sort_by_key(|&(m, _)| (dist.get(node, m), m));
            children.entry(node).or_default().extend(next.iter().map(|&(m, _)| m));
            queue.extend(next.into_iter().map(|(m, c)| (m, Some(c))));
        }
        children
    }

    /// The single-copy forwarding chain from `source`.
    pub fn data_path(&self, source: NodeId, dist: &DelayMatrix) -> Vec<NodeId> {
        let children = self.forwarding_tree(source, dist);
        let mut order = Vec::new();
        let mut stack = vec![source];
        while let Some(n) = stack.pop() {
            order.push(n);
            if let Some(c) = children.get(&n) {
                stack.extend(c.iter().rev());
            }
        }
        order
    }

    /// The chain as an overlay tree rooted at `source`.
    pub fn data_tree(&self, source: NodeId, dist: &DelayMatrix) -> OverlayTree {
        let chain = self.data_path(source, dist);
        let edges: Vec<(NodeId, NodeId)> = chain.windows(2).map(|w| (w[0], w[1])).collect();
        OverlayTree::from_edges(source, &edges, &self.lan_of).expect("a chain is a tree")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resources::tests::arb_profile;
    use crate::tree::tests::star_for;
    use proptest::prelude::*;

    fn profiles(n: u32) -> Vec<NodeProfile> {
        (0..n).map(|i| crate::resources::tests::profile(i, "1GB", "1GHz")).collect()
    }

    #[test]
    fn four_nodes_one_cluster() {
        let ps = profiles(4);
        let topo = star_for(&ps);
        let overlay = build_baseline_overlay(&ps, &topo, BaselineConfig::default()).unwrap();
        let h = overlay.hierarchy();
        assert_eq!(h.layers().len(), 2);
        assert_eq!(h.layer(0).len(), 1);
        assert_eq!(h.layer(1)[0].len(), 1);
        assert_eq!(BaselineConfig::default().send_capacity(), 1);
    }

    #[test]
    fn data_path_is_a_chain_over_everyone() {
        let ps = profiles(20);
        let topo = star_for(&ps);
        let dist = topo.delay_matrix();
        let overlay = build_baseline_overlay(&ps, &topo, BaselineConfig::default()).unwrap();
        overlay.hierarchy().check_invariants(true).unwrap();
        let tree = overlay.data_tree(NodeId(7), &dist);
        assert_eq!(tree.len(), 20);
        assert_eq!(tree.fanout(), 1);
        assert!(tree.members().all(|n| tree.children(n).len() <= 1));
        tree.check_structure().unwrap();
    }

    proptest! {
        #[test]
        fn resources_do_not_matter(
            a in proptest::collection::vec(arb_profile(0), 8),
            perm in Just((0..8usize).collect::<Vec<_>>()).prop_shuffle(),
        ) {
            let base: Vec<NodeProfile> = a.iter().enumerate().map(|(i, p)| {
                let mut p = p.clone();
                p.node = NodeId(i as u32);
                p.local_address = crate::resources::Address::new(format!("h{i}")).unwrap();
                p
            }).collect();
            let mut shuffled = base.clone();
            for (i, &j) in perm.iter().enumerate() {
                shuffled[i].cpu_speed = base[j].cpu_speed;
                shuffled[i].free_ram = base[j].free_ram;
                shuffled[i].processor_count = base[j].processor_count;
            }
            let topo = star_for(&base);
            let x = build_baseline_overlay(&base, &topo, BaselineConfig::default()).unwrap();
            let y = build_baseline_overlay(&shuffled, &topo, BaselineConfig::default()).unwrap();
            prop_assert_eq!(x, y);
        }
    }
}
