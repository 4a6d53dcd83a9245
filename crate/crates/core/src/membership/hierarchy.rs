use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{select_leader, ClusterState, MembershipError};
use crate::resources::NodeId;
use crate::underlay::DelayMatrix;

pub const DEFAULT_CLUSTER_K: usize = 3;

/// Cluster sizes are kept within `[k, 3k - 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterBounds {
    k: usize,
}

impl ClusterBounds {
    pub fn new(k: usize) -> Result<Self, MembershipError> {
        if k < 2 {
            return Err(MembershipError::ClusterParameterTooSmall(k));
        }
        Ok(ClusterBounds { k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn min(&self) -> usize {
        self.k
    }

    pub fn max(&self) -> usize {
        3 * self.k - 1
    }
}

impl Default for ClusterBounds {
    fn default() -> Self {
        ClusterBounds { k: DEFAULT_CLUSTER_K }
    }
}

/// Splits around the farthest pair: members closer to the first seed go
/// to the first half. Halves differ in size by at most one.
pub fn split_cluster(cluster: &ClusterState, dist: &DelayMatrix) -> (ClusterState, ClusterState) {
    let members: Vec<NodeId> = cluster.members.iter().copied().collect();
    let mut seeds = (members[0], members[0]);
    let mut widest = 0;
    for (i, &a) in members.iter().enumerate() {
        for &b in &members[i + 1..] {
            if dist.get(a, b) > widest {
                widest = dist.get(a, b);
                seeds = (a, b);
            }
        }
    }
    let (sa, sb) = seeds;
    let mut ordered = members;
    ordered.sort_by_key(|&m| (dist.get(m, sa) as i128 - dist.get(m, sb) as i128, m));
    let cut = ordered.len().div_ceil(2);
    let half = |part: &[NodeId]| {
        ClusterState::centered(cluster.layer, part.iter().copied().collect(), dist).expect("non-empty half")
    };
    (half(&ordered[..cut]), half(&ordered[cut..]))
}

/// Union of two clusters, led by the center of the union.
pub fn merge_clusters(a: &ClusterState, b: &ClusterState, dist: &DelayMatrix) -> ClusterState {
    let members = a.members.union(&b.members).copied().collect();
    ClusterState::centered(a.layer, members, dist).expect("non-empty union")
}

/// Sibling whose leader is closest to `cluster`'s leader; ties to the lower leader id.
fn closest_sibling(cluster: &ClusterState, siblings: &[ClusterState], dist: &DelayMatrix) -> Option<usize> {
    siblings
        .iter()
        .enumerate()
        .min_by_key(|(_, s)| (dist.get(cluster.leader, s.leader), s.leader))
        .map(|(i, _)| i)
}

/// One refinement step for a single cluster.
///
/// Returns the clusters that replace `cluster` and, when a merge happened,
/// the index of the sibling that was absorbed.
pub fn refine(
    cluster: &ClusterState,
    siblings: &[ClusterState],
    bounds: ClusterBounds,
    dist: &DelayMatrix,
) -> (Vec<ClusterState>, Option<usize>) {
    if cluster.len() > bounds.max() {
        let (a, b) = split_cluster(cluster, dist);
        return (vec![a, b], None);
    }
    if cluster.len() < bounds.min() {
        if let Some(i) = closest_sibling(cluster, siblings, dist) {
            let merged = merge_clusters(cluster, &siblings[i], dist);
            if merged.len() > bounds.max() {
                let (a, b) = split_cluster(&merged, dist);
                return (vec![a, b], Some(i));
            }
            return (vec![merged], Some(i));
        }
    }
    (vec![cluster.clone()], None)
}

/// Layered clusters.
///
/// Layer 0 partitions all members. Layer `j + 1` holds exactly the leaders
/// of the layer-`j` clusters. The top layer is one cluster with one member,
/// the Tree Head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hierarchy {
    bounds: ClusterBounds,
    layers: Vec<Vec<ClusterState>>,
}

type Chooser<'a> = dyn FnMut(u32, &BTreeSet<NodeId>) -> NodeId + 'a;

impl Hierarchy {
    pub fn new(bounds: ClusterBounds) -> Self {
        Hierarchy {
            bounds,
            layers: Vec::new(),
        }
    }

    /// Starts from given layer-0 clusters and leaders, then builds the upper layers.
    pub fn from_clusters(
        bounds: ClusterBounds,
        clusters: impl IntoIterator<Item = (BTreeSet<NodeId>, NodeId)>,
        dist: &DelayMatrix,
    ) -> Result<Self, MembershipError> {
        let mut seen = BTreeSet::new();
        let mut layer0 = Vec::new();
        for (members, leader) in clusters {
            for &m in &members {
                if !seen.insert(m) {
                    return Err(MembershipError::OverlappingClusters(m));
                }
            }
            layer0.push(ClusterState::new(0, members, leader)?);
        }
        let mut h = Hierarchy::new(bounds);
        if !layer0.is_empty() {
            h.layers.push(layer0);
            h.normalize(dist);
        }
        Ok(h)
    }

    pub fn bounds(&self) -> ClusterBounds {
        self.bounds
    }

    pub fn layers(&self) -> &[Vec<ClusterState>] {
        &self.layers
    }

    pub fn layer(&self, j: usize) -> &[ClusterState] {
        self.layers.get(j).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn len(&self) -> usize {
        self.layer(0).iter().map(ClusterState::len).sum()
    }

    pub fn members(&self) -> BTreeSet<NodeId> {
        self.layer(0).iter().flat_map(|c| c.members.iter().copied()).collect()
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.layer(0).iter().any(|c| c.contains(node))
    }

    pub fn top_layer(&self) -> Option<usize> {
        self.layers.len().checked_sub(1)
    }

    pub fn tree_head(&self) -> Option<NodeId> {
        self.layers.last().map(|top| top[0].leader)
    }

    pub fn cluster_of(&self, layer: usize, node: NodeId) -> Option<&ClusterState> {
        self.layer(layer).iter().find(|c| c.contains(node))
    }

    pub fn cluster_led_by(&self, layer: usize, leader: NodeId) -> Option<&ClusterState> {
        self.layer(layer).iter().find(|c| c.leader == leader)
    }

    /// Clusters containing `node`, from layer 0 upwards.
    pub fn clusters_containing(&self, node: NodeId) -> Vec<&ClusterState> {
        self.layers
            .iter()
            .map_while(|layer| layer.iter().find(|c| c.contains(node)))
            .collect()
    }

    pub fn highest_layer_of(&self, node: NodeId) -> Option<usize> {
        self.clusters_containing(node).len().checked_sub(1)
    }

    /// Adds `joiner` to the layer-0 cluster containing `contact`.
    pub fn insert(&mut self, joiner: NodeId, contact: NodeId, dist: &DelayMatrix) -> Result<(), MembershipError> {
        if self.contains(joiner) {
            return Err(MembershipError::AlreadyMember(joiner));
        }
        if self.layers.is_empty() {
            self.layers.push(vec![ClusterState::new(0, BTreeSet::from([joiner]), joiner)?]);
            return Ok(());
        }
        let cluster = self.layers[0]
            .iter_mut()
            .find(|c| c.contains(contact))
            .ok_or(MembershipError::NotMember(contact))?;
        cluster.members.insert(joiner);
        self.normalize(dist);
        Ok(())
    }

    pub fn remove(&mut self, node: NodeId, dist: &DelayMatrix) -> Result<(), MembershipError> {
        self.remove_with(node, dist, &mut |_, members| {
            select_leader(members, dist).expect("non-empty cluster")
        })
    }

    /// Removes `node`; every cluster it led gets the leader returned by
    /// `choose(layer, remaining members)`, which must be one of those members.
    pub fn remove_with(
        &mut self,
        node: NodeId,
        dist: &DelayMatrix,
        choose: &mut Chooser<'_>,
    ) -> Result<(), MembershipError> {
        if !self.contains(node) {
            return Err(MembershipError::NotMember(node));
        }
        self.detach(0, node, choose);
        if self.layers[0].is_empty() {
            self.layers.clear();
        }
        self.normalize(dist);
        Ok(())
    }

    fn position(&self, layer: usize, node: NodeId) -> Option<usize> {
        self.layers.get(layer)?.iter().position(|c| c.contains(node))
    }

    /// Removes `node` from `layer` and every layer above it.
    fn detach(&mut self, layer: usize, node: NodeId, choose: &mut Chooser<'_>) {
        let Some(i) = self.position(layer, node) else {
            return;
        };
        let cluster = &mut self.layers[layer][i];
        cluster.members.remove(&node);
        if cluster.members.is_empty() {
            self.layers[layer].remove(i);
            self.detach(layer + 1, node, choose);
        } else if cluster.leader == node {
            let successor = choose(layer as u32, &cluster.members);
            assert!(cluster.members.contains(&successor), "successor must be a member");
            cluster.leader = successor;
            self.substitute(layer + 1, node, successor, choose);
        }
    }

    /// Replaces `old` with `new` in `layer`, cascading when `old` led there.
    fn substitute(&mut self, layer: usize, old: NodeId, new: NodeId, choose: &mut Chooser<'_>) {
        let Some(i) = self.position(layer, old) else {
            return;
        };
        let cluster = &mut self.layers[layer][i];
        cluster.members.remove(&old);
        cluster.members.insert(new);
        if cluster.leader == old {
            let successor = choose(layer as u32, &cluster.members);
            cluster.leader = successor;
            self.substitute(layer + 1, old, successor, choose);
        }
    }

    fn split_at(&mut self, layer: usize, i: usize, dist: &DelayMatrix) {
        let cluster = self.layers[layer].remove(i);
        let (a, b) = split_cluster(&cluster, dist);
        let (la, lb) = (a.leader, b.leader);
        self.layers[layer].push(a);
        self.layers[layer].push(b);
        let old = cluster.leader;
        if let Some(up) = self.position(layer + 1, old) {
            self.layers[layer + 1][up].members.extend([la, lb]);
            if old != la && old != lb {
                self.detach(layer + 1, old, &mut |_, m| select_leader(m, dist).expect("non-empty"));
            }
        }
    }

    fn merge_at(&mut self, layer: usize, i: usize, dist: &DelayMatrix) {
        let small = self.layers[layer].remove(i);
        let j = closest_sibling(&small, &self.layers[layer], dist).expect("merge needs a sibling");
        let other_leader = self.layers[layer][j].leader;
        let merged = merge_clusters(&small, &self.layers[layer][j], dist);
        let leader = merged.leader;
        self.layers[layer][j] = merged;
        if let Some(up) = self.position(layer + 1, other_leader) {
            if leader != small.leader && leader != other_leader {
                self.layers[layer + 1][up].members.insert(leader);
            }
            for old in [small.leader, other_leader] {
                if old != leader {
                    self.detach(layer + 1, old, &mut |_, m| select_leader(m, dist).expect("non-empty"));
                }
            }
        }
    }

    /// Restores size bounds bottom-up and rebuilds the layers above as needed.
    pub fn normalize(&mut self, dist: &DelayMatrix) {
        let bounds = self.bounds;
        let mut j = 0;
        while j < self.layers.len() {
            loop {
                let layer = &self.layers[j];
                if let Some(i) = layer.iter().position(|c| c.len() > bounds.max()) {
                    self.split_at(j, i, dist);
                    continue;
                }
                if layer.len() > 1 {
                    let undersized = layer
                        .iter()
                        .enumerate()
                        .filter(|(_, c)| c.len() < bounds.min())
                        .min_by_key(|(_, c)| (c.len(), c.leader))
                        .map(|(i, _)| i);
                    if let Some(i) = undersized {
                        self.merge_at(j, i, dist);
                        continue;
                    }
                }
                break;
            }
            self.layers[j].sort_by_key(|c| c.leader);
            let layer = &self.layers[j];
            if layer.len() == 1 && layer[0].len() == 1 {
                self.layers.truncate(j + 1);
                break;
            }
            if j + 1 == self.layers.len() {
                let leaders: BTreeSet<NodeId> = layer.iter().map(|c| c.leader).collect();
                let top = ClusterState::centered(j as u32 + 1, leaders, dist).expect("non-empty layer");
                self.layers.push(vec![top]);
            }
            j += 1;
        }
    }

    /// Structural check. With `bounds_hold`, also requires every cluster
    /// that has a sibling to be within the size bounds.
    pub fn check_invariants(&self, bounds_hold: bool) -> Result<(), String> {
        for (j, layer) in self.layers.iter().enumerate() {
            if layer.is_empty() {
                return Err(format!("layer {j} is empty"));
            }
            let mut seen = BTreeSet::new();
            for c in layer {
                if c.layer as usize != j {
                    return Err(format!("cluster led by {} tagged layer {} in layer {j}", c.leader, c.layer));
                }
                if !c.contains(c.leader) {
                    return Err(format!("leader {} outside its cluster", c.leader));
                }
                for &m in &c.members {
                    if !seen.insert(m) {
                        return Err(format!("{m} in two clusters of layer {j}"));
                    }
                }
                if c.len() > self.bounds.max() {
                    return Err(format!("cluster led by {} has {} members", c.leader, c.len()));
                }
                if bounds_hold && layer.len() > 1 && c.len() < self.bounds.min() {
                    return Err(format!("cluster led by {} has only {} members", c.leader, c.len()));
                }
            }
            if let Some(next) = self.layers.get(j + 1) {
                let leaders: BTreeSet<NodeId> = layer.iter().map(|c| c.leader).collect();
                let above: BTreeSet<NodeId> = next.iter().flat_map(|c| c.members.iter().copied()).collect();
                if leaders != above {
                    return Err(format!("layer {} is not the set of layer-{j} leaders", j + 1));
                }
            }
        }
        if let Some(top) = self.layers.last() {
            if top.len() != 1 || top[0].len() != 1 {
                return Err("top layer is not a single member".into());
            }
        }
        Ok(())
    }
}
