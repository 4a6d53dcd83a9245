//! Layered cluster membership: join descent, leave, heartbeat failure
//! detection, leader selection and reconciliation.

mod detector;
mod hierarchy;
mod join;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::resources::NodeId;
use crate::underlay::DelayMatrix;

pub use detector::{
    detect_failure, FailureDetectorState, DEFAULT_HEARTBEAT_INTERVAL_MS, DEFAULT_TIMEOUT_MULTIPLIER,
};
pub use hierarchy::{merge_clusters, refine, split_cluster, ClusterBounds, Hierarchy, DEFAULT_CLUSTER_K};
pub use join::{graceful_leave, plan_join, JoinPlan, JoinRound};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MembershipError {
    #[error("cluster parameter k must be at least 2, got {0}")]
    ClusterParameterTooSmall(usize),
    #[error("cluster has no members")]
    EmptyCluster,
    #[error("leader {0} is not a member of its cluster")]
    LeaderNotMember(NodeId),
    #[error("node {0} is already a member")]
    AlreadyMember(NodeId),
    #[error("node {0} is not a member")]
    NotMember(NodeId),
    #[error("node {0} appears in two clusters of the same layer")]
    OverlappingClusters(NodeId),
    #[error("no route from {from} to {to}")]
    Unreachable { from: NodeId, to: NodeId },
    #[error("candidate {0} is not in its own cluster view")]
    CandidateNotInCluster(NodeId),
    #[error("heartbeat interval must be positive")]
    ZeroHeartbeatInterval,
    #[error("timeout multiplier must be positive")]
    ZeroTimeoutMultiplier,
}

/// One cluster of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterState {
    layer: u32,
    members: BTreeSet<NodeId>,
    leader: NodeId,
}

impl ClusterState {
    pub fn new(layer: u32, members: BTreeSet<NodeId>, leader: NodeId) -> Result<Self, MembershipError> {
        if members.is_empty() {
            return Err(MembershipError::EmptyCluster);
        }
        if !members.contains(&leader) {
            return Err(MembershipError::LeaderNotMember(leader));
        }
        Ok(ClusterState { layer, members, leader })
    }

    /// A cluster led by its delay center.
    pub fn centered(layer: u32, members: BTreeSet<NodeId>, dist: &DelayMatrix) -> Result<Self, MembershipError> {
        let leader = select_leader(&members, dist).ok_or(MembershipError::EmptyCluster)?;
        Ok(ClusterState { layer, members, leader })
    }

    pub fn layer(&self) -> u32 {
        self.layer
    }

    pub fn members(&self) -> &BTreeSet<NodeId> {
        &self.members
    }

    pub fn leader(&self) -> NodeId {
        self.leader
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.members.contains(&node)
    }
}

/// The member with the smallest worst-case delay to the others; ties go to the lower id.
pub fn select_leader<'a>(members: impl IntoIterator<Item = &'a NodeId>, dist: &DelayMatrix) -> Option<NodeId> {
    let members: Vec<NodeId> = members.into_iter().copied().collect();
    members
        .iter()
        .map(|&m| {
            let eccentricity = members.iter().map(|&o| dist.get(m, o)).max().unwrap_or(0);
            (eccentricity, m)
        })
        .min()
        .map(|(_, m)| m)
}

/// What a join query asks of its receiver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JoinStep {
    /// Ask the Tree Head for the top layer.
    Top,
    /// Round-trip measurement.
    Probe,
    /// Ask a leader for the cluster it leads at `layer`.
    Descend { layer: u32 },
    /// Ask to be admitted to the receiver's layer-0 cluster.
    Attach,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payload {
    JoinQuery(JoinStep),
    JoinResponse { layer: u32, members: Vec<NodeId> },
    /// Every layer the sender belonged to.
    Remove { layers: Vec<u32> },
    HeartBeat { view_version: u64 },
    LeaderTransfer { layer: u32, candidate: NodeId, view: Vec<NodeId> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipMessage {
    pub sender: NodeId,
    pub receiver: NodeId,
    pub payload: Payload,
}

impl MembershipMessage {
    pub fn new(sender: NodeId, receiver: NodeId, payload: Payload) -> Self {
        MembershipMessage { sender, receiver, payload }
    }

    pub fn kind(&self) -> &'static str {
        match self.payload {
            Payload::JoinQuery(_) => "JoinQuery",
            Payload::JoinResponse { .. } => "JoinResponse",
            Payload::Remove { .. } => "Remove",
            Payload::HeartBeat { .. } => "HeartBeat",
            Payload::LeaderTransfer { .. } => "LeaderTransfer",
        }
    }
}

fn join_ids(ids: &[NodeId]) -> String {
    if ids.is_empty() {
        return "-".into();
    }
    ids.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
}

impl fmt::Display for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payload::JoinQuery(JoinStep::Top) => write!(f, "query=top"),
            Payload::JoinQuery(JoinStep::Probe) => write!(f, "query=probe"),
            Payload::JoinQuery(JoinStep::Descend { layer }) => write!(f, "query=descend:{layer}"),
            Payload::JoinQuery(JoinStep::Attach) => write!(f, "query=attach"),
            Payload::JoinResponse { layer, members } => write!(f, "layer={layer} members={}", join_ids(members)),
            Payload::Remove { layers } => {
                let layers: Vec<String> = layers.iter().map(u32::to_string).collect();
                write!(f, "layers={}", layers.join(","))
            }
            Payload::HeartBeat { view_version } => write!(f, "version={view_version}"),
            Payload::LeaderTransfer { layer, candidate, view } => {
                write!(f, "layer={layer} candidate={candidate} view={}", join_ids(view))
            }
        }
    }
}

/// Result of two self-declared leaders of one cluster comparing views.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reconciliation {
    pub winner: NodeId,
    pub view: BTreeSet<NodeId>,
    /// The LeaderTransfer exchange, one message each way.
    pub messages: Vec<MembershipMessage>,
}

/// The winner is the center of the merged view, so the outcome depends only
/// on the union of views and not on which pair meets first.
pub fn reconcile_leaders(
    layer: u32,
    candidate_a: NodeId,
    view_a: &BTreeSet<NodeId>,
    candidate_b: NodeId,
    view_b: &BTreeSet<NodeId>,
    dist: &DelayMatrix,
) -> Result<Reconciliation, MembershipError> {
    for (candidate, view) in [(candidate_a, view_a), (candidate_b, view_b)] {
        if !view.contains(&candidate) {
            return Err(MembershipError::CandidateNotInCluster(candidate));
        }
    }
    let view: BTreeSet<NodeId> = view_a.union(view_b).copied().collect();
    let winner = select_leader(&view, dist).expect("union of non-empty views");
    let transfer = |from: NodeId, to: NodeId, v: &BTreeSet<NodeId>| {
        MembershipMessage::new(
            from,
            to,
            Payload::LeaderTransfer {
                layer,
                candidate: from,
                view: v.iter().copied().collect(),
            },
        )
    };
    Ok(Reconciliation {
        winner,
        messages: vec![transfer(candidate_a, candidate_b, view_a), transfer(candidate_b, candidate_a, view_b)],
        view,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn ids(v: &[u32]) -> BTreeSet<NodeId> {
        v.iter().map(|&i| NodeId(i)).collect()
    }

    /// Nodes placed on a line at the given coordinates; delay is distance.
    pub(crate) fn line(coords: &[(u32, u64)]) -> DelayMatrix {
        let pos: std::collections::BTreeMap<NodeId, u64> = coords.iter().map(|&(n, x)| (NodeId(n), x)).collect();
        DelayMatrix::from_fn(pos.keys().copied(), |a, b| pos[&a].abs_diff(pos[&b]))
    }

    #[test]
    fn leader_of_singleton_and_line() {
        let d = line(&[(1, 0), (2, 1), (3, 2)]);
        assert_eq!(select_leader(&ids(&[3]), &d), Some(NodeId(3)));
        assert_eq!(select_leader(&ids(&[1, 2, 3]), &d), Some(NodeId(2)));
        assert_eq!(select_leader(&ids(&[1, 2]), &d), Some(NodeId(1)));
        assert_eq!(select_leader(&ids(&[]), &d), None);
    }

    #[test]
    fn same_center_reconciles_in_one_exchange() {
        let d = line(&[(1, 0), (2, 1), (3, 2)]);
        let r = reconcile_leaders(0, NodeId(2), &ids(&[1, 2, 3]), NodeId(2), &ids(&[1, 2, 3]), &d).unwrap();
        assert_eq!(r.winner, NodeId(2));
        assert_eq!(r.messages.len(), 2);
    }

    #[test]
    fn healed_partition_takes_union_view() {
        let d = line(&[(1, 0), (2, 1), (3, 2), (4, 3), (5, 4)]);
        let r = reconcile_leaders(0, NodeId(1), &ids(&[1, 2]), NodeId(4), &ids(&[3, 4, 5]), &d).unwrap();
        assert_eq!(r.view, ids(&[1, 2, 3, 4, 5]));
        assert_eq!(r.winner, NodeId(3));
        assert_eq!(r.messages.iter().filter(|m| m.kind() == "LeaderTransfer").count(), 2);
        assert_eq!(
            reconcile_leaders(0, NodeId(9), &ids(&[1]), NodeId(1), &ids(&[1]), &d),
            Err(MembershipError::CandidateNotInCluster(NodeId(9)))
        );
    }

    #[test]
    fn cluster_state_validation() {
        assert_eq!(ClusterState::new(0, ids(&[]), NodeId(1)), Err(MembershipError::EmptyCluster));
        assert_eq!(ClusterState::new(0, ids(&[2]), NodeId(1)), Err(MembershipError::LeaderNotMember(NodeId(1))));
    }

    #[test]
    fn payload_rendering() {
        let m = MembershipMessage::new(NodeId(1), NodeId(2), Payload::Remove { layers: vec![0, 1] });
        assert_eq!(format!("{} {}", m.kind(), m.payload), "Remove layers=0,1");
        let q = Payload::JoinQuery(JoinStep::Descend { layer: 1 });
        assert_eq!(q.to_string(), "query=descend:1");
    }

    fn arb_matrix(n: u32) -> impl Strategy<Value = DelayMatrix> {
        proptest::collection::vec(0u64..10, (n * n) as usize).prop_map(move |w| {
            DelayMatrix::from_fn((0..n).map(NodeId), |a, b| {
                let (i, j) = (a.0.min(b.0), a.0.max(b.0));
                w[(i * n + j) as usize] + 1
            })
        })
    }

    proptest! {
        #[test]
        fn leader_minimizes_eccentricity(d in arb_matrix(7), mask in 1u32..128) {
            let members: BTreeSet<NodeId> = (0..7).filter(|i| mask & (1 << i) != 0).map(NodeId).collect();
            let leader = select_leader(&members, &d).unwrap();
            let ecc = |m: NodeId| members.iter().map(|&o| d.get(m, o)).max().unwrap();
            for &m in &members {
                prop_assert!(ecc(leader) < ecc(m) || (ecc(leader) == ecc(m) && leader <= m));
            }
        }

        #[test]
        fn three_candidates_converge_in_two_rounds(
            d in arb_matrix(8),
            masks in proptest::collection::vec(1u32..256, 3),
        ) {
            let views: Vec<BTreeSet<NodeId>> = masks
                .iter()
                .map(|m| (0..8).filter(|i| m & (1 << i) != 0).map(NodeId).collect())
                .collect();
            let candidates: Vec<NodeId> = views.iter().map(|v| select_leader(v, &d).unwrap()).collect();
            let union: BTreeSet<NodeId> = views.iter().flatten().copied().collect();
            let expected = select_leader(&union, &d).unwrap();
            for order in [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
                let [x, y, z] = order;
                let first = reconcile_leaders(0, candidates[x], &views[x], candidates[y], &views[y], &d).unwrap();
                let second = reconcile_leaders(0, first.winner, &first.view, candidates[z], &views[z], &d).unwrap();
                prop_assert_eq!(second.winner, expected);
                prop_assert_eq!(&second.view, &union);
            }
        }
    }
}
