//! The physical network: routers, hosts grouped into LANs by gateway, and
//! weighted links. Also hosts TOS encoding and TOS-aware route selection.

mod paths;
mod routing;
mod tos;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::resources::{Address, NodeId};

pub use paths::{DelayMatrix, DirectedLink, PathMetric};
pub use routing::{select_route, IcmpCode, Route, RouteDecision};
pub use tos::{encode_tos, TosDelayProfile, TosValue};

use paths::PathTable;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UnderlayError {
    #[error("precedence {0} is outside 0..=7")]
    PrecedenceOutOfRange(u8),
    #[error("TOS byte {0} has bits outside the precedence field")]
    TosNotPrecedence(u8),
    #[error("route metric must be positive")]
    ZeroMetric,
    #[error("delay multiplier for TOS {0} must be positive and finite, got {1}")]
    BadDelayMultiplier(u8, f64),
    #[error("unknown host {0}")]
    UnknownHost(NodeId),
    #[error("unknown router r{0}")]
    UnknownRouter(u32),
    #[error("host {0} declared twice")]
    DuplicateHost(NodeId),
    #[error("router r{0} declared twice")]
    DuplicateRouter(u32),
    #[error("link {0} connects an endpoint to itself")]
    SelfLoop(Endpoint),
    #[error("link {0} - {1} has zero capacity")]
    ZeroCapacity(Endpoint, Endpoint),
    #[error("hosts {0} and {1} are not connected")]
    Disconnected(NodeId, NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RouterId(pub u32);

impl fmt::Display for RouterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// A vertex of the underlay graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Endpoint {
    Router(RouterId),
    Host(NodeId),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Router(r) => write!(f, "{r}"),
            Endpoint::Host(n) => write!(f, "n{n}"),
        }
    }
}

impl std::str::FromStr for Endpoint {
    type Err = String;

    /// `r<id>` for routers, `n<id>` for hosts.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("`{s}` is not an endpoint (expected r<id> or n<id>)");
        let (kind, id) = s.split_at(s.char_indices().nth(1).map(|(i, _)| i).ok_or_else(bad)?);
        let id: u32 = id.parse().map_err(|_| bad())?;
        match kind {
            "r" => Ok(Endpoint::Router(RouterId(id))),
            "n" => Ok(Endpoint::Host(NodeId(id))),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub a: Endpoint,
    pub b: Endpoint,
    pub delay_ms: u64,
    pub capacity_bps: u64,
}

/// An immutable underlay. Shortest paths are computed on first use and cached.
#[derive(Debug, Clone)]
pub struct UnderlayTopology {
    routers: BTreeSet<RouterId>,
    hosts: BTreeMap<NodeId, Address>,
    links: Vec<Link>,
    lans: BTreeMap<Address, BTreeSet<NodeId>>,
    paths: OnceLock<[PathTable; 2]>,
}

impl PartialEq for UnderlayTopology {
    fn eq(&self, other: &Self) -> bool {
        self.routers == other.routers && self.hosts == other.hosts && self.links == other.links
    }
}

#[derive(Debug, Clone, Default)]
pub struct TopologyBuilder {
    routers: Vec<RouterId>,
    hosts: Vec<(NodeId, Address)>,
    links: Vec<Link>,
}

impl TopologyBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn router(mut self, id: u32) -> Self {
        self.routers.push(RouterId(id));
        self
    }

    pub fn host(mut self, node: NodeId, gateway: Address) -> Self {
        self.hosts.push((node, gateway));
        self
    }

    pub fn link(mut self, a: Endpoint, b: Endpoint, delay_ms: u64, capacity_bps: u64) -> Self {
        self.links.push(Link {
            a,
            b,
            delay_ms,
            capacity_bps,
        });
        self
    }

    pub fn add_router(&mut self, id: u32) {
        self.routers.push(RouterId(id));
    }

    pub fn add_host(&mut self, node: NodeId, gateway: Address) {
        self.hosts.push((node, gateway));
    }

    pub fn add_link(&mut self, a: Endpoint, b: Endpoint, delay_ms: u64, capacity_bps: u64) {
        self.links.push(Link {
            a,
            b,
            delay_ms,
            capacity_bps,
        });
    }

    pub fn build(self) -> Result<UnderlayTopology, UnderlayError> {
        let mut routers = BTreeSet::new();
        for r in self.routers {
            if !routers.insert(r) {
                return Err(UnderlayError::DuplicateRouter(r.0));
            }
        }
        let mut hosts = BTreeMap::new();
        for (node, gateway) in self.hosts {
            if hosts.insert(node, gateway).is_some() {
                return Err(UnderlayError::DuplicateHost(node));
            }
        }
        for link in &self.links {
            if link.a == link.b {
                return Err(UnderlayError::SelfLoop(link.a));
            }
            if link.capacity_bps == 0 {
                return Err(UnderlayError::ZeroCapacity(link.a, link.b));
            }
            for end in [link.a, link.b] {
                match end {
                    Endpoint::Router(r) if !routers.contains(&r) => {
                        return Err(UnderlayError::UnknownRouter(r.0))
                    }
                    Endpoint::Host(n) if !hosts.contains_key(&n) => {
                        return Err(UnderlayError::UnknownHost(n))
                    }
                    _ => {}
                }
            }
        }
        let topology = UnderlayTopology::assemble(routers, hosts, self.links);
        topology.check_connected()?;
        Ok(topology)
    }
}

impl UnderlayTopology {
    fn assemble(routers: BTreeSet<RouterId>, hosts: BTreeMap<NodeId, Address>, links: Vec<Link>) -> Self {
        let mut lans: BTreeMap<Address, BTreeSet<NodeId>> = BTreeMap::new();
        for (node, gateway) in &hosts {
            lans.entry(gateway.clone()).or_default().insert(*node);
        }
        UnderlayTopology {
            routers,
            hosts,
            links,
            lans,
            paths: OnceLock::new(),
        }
    }

    fn check_connected(&self) -> Result<(), UnderlayError> {
        let table = &self.path_tables()[0];
        let mut hosts = self.hosts.keys();
        if let Some(&first) = hosts.next() {
            for &other in hosts {
                if table.cost(first, other).is_none() {
                    return Err(UnderlayError::Disconnected(first, other));
                }
            }
        }
        Ok(())
    }

    fn path_tables(&self) -> &[PathTable; 2] {
        self.paths.get_or_init(|| {
            [
                PathTable::compute(self, PathMetric::Delay),
                PathTable::compute(self, PathMetric::Hops),
            ]
        })
    }

    fn table(&self, metric: PathMetric) -> &PathTable {
        &self.path_tables()[match metric {
            PathMetric::Delay => 0,
            PathMetric::Hops => 1,
        }]
    }

    pub fn routers(&self) -> impl Iterator<Item = RouterId> + '_ {
        self.routers.iter().copied()
    }

    pub fn hosts(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.hosts.keys().copied()
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn lans(&self) -> &BTreeMap<Address, BTreeSet<NodeId>> {
        &self.lans
    }

    pub fn contains_host(&self, node: NodeId) -> bool {
        self.hosts.contains_key(&node)
    }

    pub fn lan_of(&self, node: NodeId) -> Result<&Address, UnderlayError> {
        self.hosts.get(&node).ok_or(UnderlayError::UnknownHost(node))
    }

    pub fn lan_members(&self, gateway: &Address) -> impl Iterator<Item = NodeId> + '_ {
        self.lans.get(gateway).into_iter().flatten().copied()
    }

    /// A copy of this topology with `node` placed behind `gateway`.
    pub fn with_host_moved(&self, node: NodeId, gateway: Address) -> Result<Self, UnderlayError> {
        if !self.hosts.contains_key(&node) {
            return Err(UnderlayError::UnknownHost(node));
        }
        let mut hosts = self.hosts.clone();
        hosts.insert(node, gateway);
        Ok(UnderlayTopology::assemble(self.routers.clone(), hosts, self.links.clone()))
    }

    pub fn shortest_path_delay(&self, a: NodeId, b: NodeId) -> Result<u64, UnderlayError> {
        self.path_cost(a, b, PathMetric::Delay)
    }

    pub fn path_cost(&self, a: NodeId, b: NodeId, metric: PathMetric) -> Result<u64, UnderlayError> {
        for n in [a, b] {
            if !self.hosts.contains_key(&n) {
                return Err(UnderlayError::UnknownHost(n));
            }
        }
        self.table(metric).cost(a, b).ok_or(UnderlayError::Disconnected(a, b))
    }

    /// The links traversed by the shortest path from `a` to `b`, in order.
    pub fn shortest_path_links(
        &self,
        a: NodeId,
        b: NodeId,
        metric: PathMetric,
    ) -> Result<Vec<DirectedLink>, UnderlayError> {
        self.path_cost(a, b, metric)?;
        Ok(self.table(metric).links(a, b))
    }

    /// Host-to-host shortest-path delays for every pair.
    pub fn delay_matrix(&self) -> DelayMatrix {
        self.metric_matrix(PathMetric::Delay)
    }

    pub fn metric_matrix(&self, metric: PathMetric) -> DelayMatrix {
        let table = self.table(metric);
        DelayMatrix::from_fn(self.hosts(), |a, b| table.cost(a, b).expect("topology is connected"))
    }
}
