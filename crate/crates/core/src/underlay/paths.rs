use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use super::{Endpoint, UnderlayTopology};
use crate::resources::NodeId;

/// What "path length" means when comparing overlay and underlay paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathMetric {
    /// Sum of link delays in milliseconds.
    #[default]
    Delay,
    /// Number of links.
    Hops,
}

/// One traversal of an underlay link in a given direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DirectedLink {
    /// Index into [`UnderlayTopology::links`].
    pub link: usize,
    pub from: Endpoint,
    pub to: Endpoint,
}

/// Single-source shortest paths from every host.
#[derive(Debug, Clone)]
pub(super) struct PathTable {
    index: BTreeMap<Endpoint, usize>,
    vertices: Vec<Endpoint>,
    sources: BTreeMap<NodeId, SourceTree>,
}

#[derive(Debug, Clone)]
struct SourceTree {
    cost: Vec<Option<u64>>,
    /// Link used to reach each vertex, as (link index, previous vertex index).
    pred: Vec<Option<(usize, usize)>>,
}

impl PathTable {
    pub(super) fn compute(topology: &UnderlayTopology, metric: PathMetric) -> Self {
        let vertices: Vec<Endpoint> = topology
            .routers
            .iter()
            .map(|&r| Endpoint::Router(r))
            .chain(topology.hosts.keys().map(|&n| Endpoint::Host(n)))
            .collect();
        let index: BTreeMap<Endpoint, usize> = vertices.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); vertices.len()];
        for (link_idx, link) in topology.links.iter().enumerate() {
            let (a, b) = (index[&link.a], index[&link.b]);
            adjacency[a].push((b, link_idx));
            adjacency[b].push((a, link_idx));
        }
        // Lexicographic weight: the chosen metric first, the other one as tiebreak.
        let weight = |link_idx: usize| -> (u64, u64) {
            let delay = topology.links[link_idx].delay_ms;
            match metric {
                PathMetric::Delay => (delay, 1),
                PathMetric::Hops => (1, delay),
            }
        };
        let sources = topology
            .hosts
            .keys()
            .map(|&host| {
                let start = index[&Endpoint::Host(host)];
                let mut best: Vec<Option<(u64, u64)>> = vec![None; vertices.len()];
                let mut pred = vec![None; vertices.len()];
                let mut heap = BinaryHeap::new();
                best[start] = Some((0, 0));
                heap.push(Reverse(((0u64, 0u64), start)));
                while let Some(Reverse((cost, v))) = heap.pop() {
                    if best[v] != Some(cost) {
                        continue;
                    }
                    for &(next, link_idx) in &adjacency[v] {
                        let (w1, w2) = weight(link_idx);
                        let candidate = (cost.0 + w1, cost.1 + w2);
                        if best[next].is_none_or(|b| candidate < b) {
                            best[next] = Some(candidate);
                            pred[next] = Some((link_idx, v));
                            heap.push(Reverse((candidate, next)));
                        }
                    }
                }
                let cost = best.into_iter().map(|c| c.map(|(primary, _)| primary)).collect();
                (host, SourceTree { cost, pred })
            })
            .collect();
        PathTable {
            index,
            vertices,
            sources,
        }
    }

    pub(super) fn cost(&self, a: NodeId, b: NodeId) -> Option<u64> {
        let tree = self.sources.get(&a)?;
        tree.cost[*self.index.get(&Endpoint::Host(b))?]
    }

    pub(super) fn links(&self, a: NodeId, b: NodeId) -> Vec<DirectedLink> {
        let tree = &self.sources[&a];
        let mut at = self.index[&Endpoint::Host(b)];
        let mut out = Vec::new();
        while let Some((link, prev)) = tree.pred[at] {
            out.push(DirectedLink {
                link,
                from: self.vertices[prev],
                to: self.vertices[at],
            });
            at = prev;
        }
        out.reverse();
        out
    }
}

/// Symmetric host-to-host distance table.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DelayMatrix {
    index: BTreeMap<NodeId, usize>,
    values: Vec<u64>,
}

impl DelayMatrix {
    pub fn from_fn(nodes: impl IntoIterator<Item = NodeId>, mut f: impl FnMut(NodeId, NodeId) -> u64) -> Self {
        let nodes: Vec<NodeId> = nodes.into_iter().collect();
        let index: BTreeMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        let mut values = vec![0; nodes.len() * nodes.len()];
        for (i, &a) in nodes.iter().enumerate() {
            for (j, &b) in nodes.iter().enumerate() {
                values[i * nodes.len() + j] = if a == b { 0 } else { f(a, b) };
            }
        }
        DelayMatrix { index, values }
    }

    /// Builds a matrix from unordered pairs; pairs not listed are taken as equal to `default`.
    pub fn from_pairs(nodes: impl IntoIterator<Item = NodeId>, pairs: &[(u32, u32, u64)], default: u64) -> Self {
        let lookup: BTreeMap<(NodeId, NodeId), u64> = pairs
            .iter()
            .flat_map(|&(a, b, d)| [((NodeId(a), NodeId(b)), d), ((NodeId(b), NodeId(a)), d)])
            .collect();
        Self::from_fn(nodes, |a, b| lookup.get(&(a, b)).copied().unwrap_or(default))
    }

    /// Distance between `a` and `b`. Panics if either is unknown.
    pub fn get(&self, a: NodeId, b: NodeId) -> u64 {
        self.try_get(a, b)
            .unwrap_or_else(|| panic!("no distance for pair ({a}, {b})"))
    }

    pub fn try_get(&self, a: NodeId, b: NodeId) -> Option<u64> {
        let n = self.index.len();
        Some(self.values[self.index.get(&a)? * n + self.index.get(&b)?])
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.index.contains_key(&node)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.index.keys().copied()
    }
}
