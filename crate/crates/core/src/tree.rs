//! Resource-aware distribution tree.
//!
//! Construction works in three steps:
//!
//! 1. The fan-out threshold `p = floor(free_bw / app_bw)` bounds how many
//!    children any node may feed.
//! 2. Every LAN (nodes sharing a gateway) elects its most capable member as
//!    header. The most capable header overall becomes the root.
//! 3. Remaining headers, then all other members, are taken in priority-queue
//!    order and attached to the shallowest node with spare capacity (ties go
//!    to the parent that was attached first). A node at depth `d` accepts a
//!    child only while it has fewer than `p` children and level `d + 1` holds
//!    fewer than `2^d` nodes. Headers may only hang below headers; other
//!    members must stay inside their own header's subtree.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::resources::{build_priority_queue, Address, NodeId, NodeProfile, ResourceError};
use crate::underlay::UnderlayTopology;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("application bandwidth must be positive")]
    ZeroApplicationBandwidth,
    #[error("insufficient bandwidth: {free_bps} bit/s free cannot carry one {app_bps} bit/s stream")]
    InsufficientBandwidth { free_bps: u64, app_bps: u64 },
    #[error("fan-out must be at least 1")]
    ZeroFanout,
    #[error(transparent)]
    Resources(#[from] ResourceError),
    #[error("gateway `{gateway}` of node {node} is not a LAN of the topology")]
    UnknownGateway { node: NodeId, gateway: Address },
    #[error("node {0} cannot be placed: no node in reach has spare capacity")]
    PlacementFailed(NodeId),
    #[error("node {0} is not in the tree")]
    NotInTree(NodeId),
    #[error("node {0} is the root; root failure is handled by leader selection")]
    RootFailure(NodeId),
    #[error("no profile for node {0}")]
    MissingProfile(NodeId),
    #[error("edge list does not form a tree: {0}")]
    Malformed(String),
}

/// Per-node child bound derived from bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FanoutThreshold {
    p: u32,
    free_network_bandwidth: u64,
    application_bandwidth: u64,
}

impl FanoutThreshold {
    /// A threshold with an explicit `p`, as if `p` streams fit exactly.
    pub fn fixed(p: u32) -> Result<Self, TreeError> {
        if p == 0 {
            return Err(TreeError::ZeroFanout);
        }
        Ok(FanoutThreshold {
            p,
            free_network_bandwidth: p as u64,
            application_bandwidth: 1,
        })
    }

    pub fn p(&self) -> u32 {
        self.p
    }

    pub fn free_network_bandwidth(&self) -> u64 {
        self.free_network_bandwidth
    }

    pub fn application_bandwidth(&self) -> u64 {
        self.application_bandwidth
    }
}

pub fn compute_fanout_threshold(free_bw: u64, app_bw: u64) -> Result<FanoutThreshold, TreeError> {
    if app_bw == 0 {
        return Err(TreeError::ZeroApplicationBandwidth);
    }
    let p = free_bw / app_bw;
    if p == 0 {
        return Err(TreeError::InsufficientBandwidth {
            free_bps: free_bw,
            app_bps: app_bw,
        });
    }
    Ok(FanoutThreshold {
        p: u32::try_from(p).unwrap_or(u32::MAX),
        free_network_bandwidth: free_bw,
        application_bandwidth: app_bw,
    })
}

/// Whether `n` participants need a tree; otherwise they talk over a full mesh.
pub fn needs_tree(n: usize, threshold: &FanoutThreshold) -> bool {
    n as u64 > threshold.p as u64
}

/// Maximum number of nodes at `depth` (root depth 1).
pub fn level_capacity(depth: u32) -> u64 {
    if depth == 0 {
        0
    } else if depth > 64 {
        u64::MAX
    } else {
        1u64.checked_shl(depth - 1).unwrap_or(u64::MAX)
    }
}

pub fn elect_headers(
    profiles: &[NodeProfile],
    topology: &UnderlayTopology,
) -> Result<BTreeMap<Address, NodeId>, TreeError> {
    let mut best: BTreeMap<Address, &NodeProfile> = BTreeMap::new();
    for profile in profiles {
        if !topology.lans().contains_key(&profile.gateway) {
            return Err(TreeError::UnknownGateway {
                node: profile.node,
                gateway: profile.gateway.clone(),
            });
        }
        best.entry(profile.gateway.clone())
            .and_modify(|current| {
                if profile.capacity_key() > current.capacity_key() {
                    *current = profile;
                }
            })
            .or_insert(profile);
    }
    Ok(best.into_iter().map(|(gw, p)| (gw, p.node)).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlayTree {
    root: NodeId,
    fanout: u32,
    parent_of: BTreeMap<NodeId, NodeId>,
    children_of: BTreeMap<NodeId, Vec<NodeId>>,
    depth_of: BTreeMap<NodeId, u32>,
    headers: BTreeMap<Address, NodeId>,
    lan_of: BTreeMap<NodeId, Address>,
    /// Order in which nodes were attached; breaks ties between equally shallow parents.
    attached_at: BTreeMap<NodeId, u64>,
    next_seq: u64,
}

impl OverlayTree {
    fn singleton(root: NodeId, fanout: u32, lan: Address) -> Self {
        OverlayTree {
            root,
            fanout,
            parent_of: BTreeMap::new(),
            children_of: BTreeMap::from([(root, Vec::new())]),
            depth_of: BTreeMap::from([(root, 1)]),
            headers: BTreeMap::new(),
            lan_of: BTreeMap::from([(root, lan)]),
            attached_at: BTreeMap::from([(root, 0)]),
            next_seq: 1,
        }
    }

    /// A tree from explicit `(parent, child)` edges, with no header roles.
    /// Children keep the order in which their edges are listed.
    pub fn from_edges(
        root: NodeId,
        edges: &[(NodeId, NodeId)],
        lan_of: &BTreeMap<NodeId, Address>,
    ) -> Result<Self, TreeError> {
        let lan = |n: NodeId| lan_of.get(&n).cloned().ok_or(TreeError::MissingProfile(n));
        let fanout = {
            let mut counts: BTreeMap<NodeId, u32> = BTreeMap::new();
            for (parent, _) in edges {
                *counts.entry(*parent).or_default() += 1;
            }
            counts.values().copied().max().unwrap_or(1).max(1)
        };
        let mut tree = OverlayTree::singleton(root, fanout, lan(root)?);
        let mut pending: Vec<(NodeId, NodeId)> = edges.to_vec();
        while !pending.is_empty() {
            let before = pending.len();
            let mut rest = Vec::new();
            for (parent, child) in pending {
                if tree.contains(child) {
                    return Err(TreeError::Malformed(format!("node {child} has two parents")));
                }
                if tree.contains(parent) {
                    let depth = tree.depth_of[&parent] + 1;
                    tree.insert_child(parent, child, depth, lan(child)?, None);
                } else {
                    rest.push((parent, child));
                }
            }
            if rest.len() == before {
                return Err(TreeError::Malformed("edges not reachable from the root".into()));
            }
            pending = rest;
        }
        Ok(tree)
    }

    fn insert_child(&mut self, parent: NodeId, child: NodeId, depth: u32, lan: Address, index: Option<usize>) {
        let siblings = self.children_of.entry(parent).or_default();
        match index {
            Some(i) => siblings.insert(i.min(siblings.len()), child),
            None => siblings.push(child),
        }
        self.children_of.entry(child).or_default();
        self.parent_of.insert(child, parent);
        self.depth_of.insert(child, depth);
        self.lan_of.insert(child, lan);
        self.attached_at.insert(child, self.next_seq);
        self.next_seq += 1;
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn fanout(&self) -> u32 {
        self.fanout
    }

    pub fn len(&self) -> usize {
        self.depth_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth_of.is_empty()
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.depth_of.contains_key(&node)
    }

    pub fn members(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.depth_of.keys().copied()
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        self.parent_of.get(&node).copied()
    }

    pub fn children(&self, node: NodeId) -> &[NodeId] {
        self.children_of.get(&node).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn depth(&self, node: NodeId) -> Option<u32> {
        self.depth_of.get(&node).copied()
    }

    pub fn height(&self) -> u32 {
        self.depth_of.values().copied().max().unwrap_or(0)
    }

    pub fn headers(&self) -> &BTreeMap<Address, NodeId> {
        &self.headers
    }

    pub fn is_header(&self, node: NodeId) -> bool {
        self.lan_of
            .get(&node)
            .is_some_and(|lan| self.headers.get(lan) == Some(&node))
    }

    pub fn lan(&self, node: NodeId) -> Option<&Address> {
        self.lan_of.get(&node)
    }

    pub fn level_count(&self, depth: u32) -> usize {
        self.depth_of.values().filter(|&&d| d == depth).count()
    }

    /// Nodes from the root down to `node`, inclusive.
    pub fn path_from_root(&self, node: NodeId) -> Vec<NodeId> {
        let mut path = vec![node];
        let mut at = node;
        while let Some(&parent) = self.parent_of.get(&at) {
            path.push(parent);
            at = parent;
        }
        path.reverse();
        path
    }

    /// The unique tree path from `a` to `b`, inclusive of both ends.
    pub fn tree_path(&self, a: NodeId, b: NodeId) -> Option<Vec<NodeId>> {
        if !self.contains(a) || !self.contains(b) {
            return None;
        }
        let up = self.path_from_root(a);
        let down = self.path_from_root(b);
        let common = up.iter().zip(&down).take_while(|(x, y)| x == y).count();
        let mut path: Vec<NodeId> = up[common - 1..].iter().rev().copied().collect();
        path.extend_from_slice(&down[common..]);
        Some(path)
    }

    pub fn is_ancestor(&self, ancestor: NodeId, node: NodeId) -> bool {
        let mut at = node;
        loop {
            if at == ancestor {
                return true;
            }
            match self.parent_of.get(&at) {
                Some(&p) => at = p,
                None => return false,
            }
        }
    }

    /// `node` and its descendants in preorder.
    pub fn subtree(&self, node: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            out.push(n);
            stack.extend(self.children(n).iter().rev());
        }
        out
    }

    pub fn preorder(&self) -> Vec<NodeId> {
        self.subtree(self.root)
    }

    /// Structural check: one root, consistent parent/child maps, every node
    /// reachable, depths consistent, level capacities and the fan-out bound held.
    pub fn check_structure(&self) -> Result<(), String> {
        if self.parent_of.contains_key(&self.root) {
            return Err(format!("root {} has a parent", self.root));
        }
        for (&child, &parent) in &self.parent_of {
            if !self.children(parent).contains(&child) {
                return Err(format!("{child} lists parent {parent} but is not its child"));
            }
            if self.depth(child) != self.depth(parent).map(|d| d + 1) {
                return Err(format!("depth of {child} inconsistent with parent {parent}"));
            }
        }
        for (&parent, children) in &self.children_of {
            for child in children {
                if self.parent_of.get(child) != Some(&parent) {
                    return Err(format!("{parent} lists child {child} with a different parent"));
                }
            }
            if children.len() > self.fanout as usize {
                return Err(format!("{parent} has {} children, fan-out is {}", children.len(), self.fanout));
            }
        }
        let reached = self.preorder();
        if reached.len() != self.len() || reached.iter().collect::<BTreeSet<_>>().len() != reached.len() {
            return Err("not every member is reachable exactly once from the root".into());
        }
        for depth in 1..=self.height() {
            if self.level_count(depth) as u64 > level_capacity(depth) {
                return Err(format!("level {depth} holds {} nodes", self.level_count(depth)));
            }
        }
        Ok(())
    }

    /// One line per node in preorder: `id depth parent lan header`.
    pub fn dump(&self) -> String {
        let mut out = String::from("# id depth parent lan header\n");
        for node in self.preorder() {
            let parent = self.parent(node).map_or_else(|| "-".to_string(), |p| p.to_string());
            let lan = self.lan_of.get(&node).map_or("-", Address::as_str);
            let flag = if self.is_header(node) { "H" } else { "-" };
            let _ = writeln!(out, "{node} {} {parent} {lan} {flag}", self.depth_of[&node]);
        }
        out
    }
}

struct Placer<'a> {
    tree: OverlayTree,
    profiles: BTreeMap<NodeId, &'a NodeProfile>,
    level_counts: BTreeMap<u32, u64>,
}

impl<'a> Placer<'a> {
    fn new(tree: OverlayTree, profiles: BTreeMap<NodeId, &'a NodeProfile>) -> Self {
        let mut level_counts = BTreeMap::new();
        for &d in tree.depth_of.values() {
            *level_counts.entry(d).or_default() += 1;
        }
        Placer {
            tree,
            profiles,
            level_counts,
        }
    }

    fn can_accept(&self, parent: NodeId) -> bool {
        let depth = self.tree.depth_of[&parent];
        self.tree.children(parent).len() < self.tree.fanout as usize
            && self.level_counts.get(&(depth + 1)).copied().unwrap_or(0) < level_capacity(depth + 1)
    }

    fn place(&mut self, node: NodeId) -> Result<(), TreeError> {
        let lan = self.profiles.get(&node).ok_or(TreeError::MissingProfile(node))?.gateway.clone();
        let header = self.tree.headers.get(&lan).copied();
        let is_header = header == Some(node);
        let parent = self
            .tree
            .members()
            .filter(|&c| {
                if is_header {
                    self.tree.is_header(c)
                } else {
                    header.is_some_and(|h| self.tree.is_ancestor(h, c))
                }
            })
            .filter(|&c| self.can_accept(c))
            .min_by_key(|c| (self.tree.depth_of[c], self.tree.attached_at[c]))
            .ok_or(TreeError::PlacementFailed(node))?;
        let depth = self.tree.depth_of[&parent] + 1;
        self.tree.insert_child(parent, node, depth, lan, None);
        *self.level_counts.entry(depth).or_default() += 1;
        Ok(())
    }

    /// Attaches `nodes` headers-first, each group in priority-queue order.
    fn place_all(&mut self, nodes: &[NodeId]) -> Result<(), TreeError> {
        if nodes.is_empty() {
            return Ok(());
        }
        let queue = build_priority_queue(nodes.iter().map(|n| self.profiles[n]))?;
        let (headers, others): (Vec<NodeId>, Vec<NodeId>) = queue
            .into_iter()
            .partition(|&n| self.tree.headers.get(&self.profiles[&n].gateway) == Some(&n));
        for node in headers.into_iter().chain(others) {
            self.place(node)?;
        }
        Ok(())
    }
}

fn profile_map(profiles: &[NodeProfile]) -> Result<BTreeMap<NodeId, &NodeProfile>, TreeError> {
    let mut map = BTreeMap::new();
    for p in profiles {
        if map.insert(p.node, p).is_some() {
            return Err(ResourceError::DuplicateNode(p.node).into());
        }
    }
    Ok(map)
}

pub fn build_tree(
    profiles: &[NodeProfile],
    topology: &UnderlayTopology,
    threshold: &FanoutThreshold,
) -> Result<OverlayTree, TreeError> {
    let by_id = profile_map(profiles)?;
    let headers = elect_headers(profiles, topology)?;
    let queue = build_priority_queue(profiles)?;
    let root = queue[0];
    let mut tree = OverlayTree::singleton(root, threshold.p, by_id[&root].gateway.clone());
    tree.headers = headers;
    let mut placer = Placer::new(tree, by_id);
    placer.place_all(&queue[1..])?;
    Ok(placer.tree)
}

/// Repairs the tree after `failed` (not the root) leaves.
///
/// The most capable node below `failed` takes over its slot; every other
/// node that hung below `failed` is attached again by the normal rules.
pub fn replace_failed_interior(
    tree: &OverlayTree,
    failed: NodeId,
    profiles: &[NodeProfile],
) -> Result<OverlayTree, TreeError> {
    if !tree.contains(failed) {
        return Err(TreeError::NotInTree(failed));
    }
    if failed == tree.root {
        return Err(TreeError::RootFailure(failed));
    }
    let by_id = profile_map(profiles)?;
    for member in tree.members() {
        if member != failed && !by_id.contains_key(&member) {
            return Err(TreeError::MissingProfile(member));
        }
    }
    let detached: Vec<NodeId> = tree.subtree(failed).into_iter().skip(1).collect();
    let parent = tree.parent_of[&failed];
    let slot = tree.children(parent).iter().position(|&c| c == failed).unwrap_or(0);

    let mut next = tree.clone();
    for node in std::iter::once(failed).chain(detached.iter().copied()) {
        next.parent_of.remove(&node);
        next.children_of.remove(&node);
        next.depth_of.remove(&node);
        next.lan_of.remove(&node);
        next.attached_at.remove(&node);
    }
    next.children_of.get_mut(&parent).expect("parent survives").retain(|&c| c != failed);

    // Header roles over the survivors; only the failed node's LAN can change.
    let survivors: Vec<NodeProfile> = tree
        .members()
        .filter(|&n| n != failed)
        .map(|n| by_id[&n].clone())
        .collect();
    next.headers.clear();
    for p in &survivors {
        next.headers
            .entry(p.gateway.clone())
            .and_modify(|h| {
                if p.capacity_key() > by_id[h].capacity_key() {
                    *h = p.node;
                }
            })
            .or_insert(p.node);
    }

    let orphans: Vec<NodeId> = match detached.iter().map(|n| by_id[n].capacity_key()).max() {
        Some(best) => {
            let promoted = best.node;
            next.insert_child(
                parent,
                promoted,
                tree.depth_of[&failed],
                by_id[&promoted].gateway.clone(),
                Some(slot),
            );
            next.attached_at.insert(promoted, tree.attached_at[&failed]);
            detached.into_iter().filter(|&n| n != promoted).collect()
        }
        None => Vec::new(),
    };
    let mut placer = Placer::new(next, by_id);
    placer.place_all(&orphans)?;
    Ok(placer.tree)
}
