use std::collections::BTreeSet;

use super::{select_leader, Hierarchy, JoinStep, MembershipError, MembershipMessage, Payload};
use crate::resources::NodeId;
use crate::underlay::DelayMatrix;

/// One probing round at one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinRound {
    pub layer: u32,
    pub probed: Vec<NodeId>,
    pub closest: NodeId,
}

/// The messages a join exchanges and where the joiner ends up.
///
/// `phases` run one after another; the query/response pairs inside a phase
/// run concurrently.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinPlan {
    pub joiner: NodeId,
    pub rounds: Vec<JoinRound>,
    pub phases: Vec<Vec<(MembershipMessage, MembershipMessage)>>,
    /// Leader of the layer-0 cluster the joiner is admitted to.
    pub leader: NodeId,
}

impl JoinPlan {
    pub fn messages(&self) -> Vec<MembershipMessage> {
        self.phases
            .iter()
            .flat_map(|phase| phase.iter().flat_map(|(q, r)| [q.clone(), r.clone()]))
            .collect()
    }
}

fn exchange(
    joiner: NodeId,
    peer: NodeId,
    step: JoinStep,
    layer: u32,
    members: &BTreeSet<NodeId>,
) -> (MembershipMessage, MembershipMessage) {
    (
        MembershipMessage::new(joiner, peer, Payload::JoinQuery(step)),
        MembershipMessage::new(
            peer,
            joiner,
            Payload::JoinResponse {
                layer,
                members: members.iter().copied().collect(),
            },
        ),
    )
}

/// Descends from the Tree Head, at each layer probing every member of the
/// current cluster and following the one with the smallest round-trip time.
pub fn plan_join(h: &Hierarchy, joiner: NodeId, dist: &DelayMatrix) -> Result<JoinPlan, MembershipError> {
    if h.contains(joiner) {
        return Err(MembershipError::AlreadyMember(joiner));
    }
    let mut plan = JoinPlan {
        joiner,
        rounds: Vec::new(),
        phases: Vec::new(),
        leader: joiner,
    };
    let (Some(head), Some(top)) = (h.tree_head(), h.top_layer()) else {
        return Ok(plan);
    };
    let rtt = |to: NodeId| {
        dist.try_get(joiner, to)
            .map(|d| 2 * d)
            .ok_or(MembershipError::Unreachable { from: joiner, to })
    };
    rtt(head)?;
    let mut members = h.layer(top)[0].members().clone();
    plan.phases.push(vec![exchange(joiner, head, JoinStep::Top, top as u32, &members)]);
    if top == 0 {
        plan.phases.push(vec![exchange(joiner, head, JoinStep::Attach, 0, &members)]);
        plan.leader = head;
        return Ok(plan);
    }
    let mut layer = top;
    loop {
        let mut probes = Vec::new();
        let mut measured = Vec::new();
        for &m in &members {
            measured.push((rtt(m)?, m));
            probes.push(exchange(joiner, m, JoinStep::Probe, layer as u32, &BTreeSet::new()));
        }
        let (_, closest) = measured.into_iter().min().expect("clusters are non-empty");
        plan.phases.push(probes);
        plan.rounds.push(JoinRound {
            layer: layer as u32,
            probed: members.iter().copied().collect(),
            closest,
        });
        let below = h
            .cluster_led_by(layer - 1, closest)
            .expect("every member above layer 0 leads a cluster below")
            .members()
            .clone();
        if layer == 1 {
            plan.phases.push(vec![exchange(joiner, closest, JoinStep::Attach, 0, &below)]);
            plan.leader = closest;
            return Ok(plan);
        }
        let step = JoinStep::Descend { layer: layer as u32 - 1 };
        plan.phases.push(vec![exchange(joiner, closest, step, layer as u32 - 1, &below)]);
        members = below;
        layer -= 1;
    }
}

/// One Remove per cluster the leaver belongs to, addressed to that
/// cluster's leader or, where the leaver leads, to its successor.
pub fn graceful_leave(
    h: &Hierarchy,
    leaver: NodeId,
    dist: &DelayMatrix,
) -> Result<Vec<MembershipMessage>, MembershipError> {
    let clusters = h.clusters_containing(leaver);
    if clusters.is_empty() {
        return Err(MembershipError::NotMember(leaver));
    }
    let layers: Vec<u32> = (0..clusters.len() as u32).collect();
    let mut out = Vec::new();
    let mut successor_below = None;
    for cluster in clusters {
        let recipient = if cluster.leader() != leaver {
            Some(cluster.leader())
        } else {
            let others: BTreeSet<NodeId> = cluster.members().iter().copied().filter(|&m| m != leaver).collect();
            select_leader(&others, dist).or(successor_below)
        };
        successor_below = recipient;
        if let Some(to) = recipient {
            out.push(MembershipMessage::new(leaver, to, Payload::Remove { layers: layers.clone() }));
        }
    }
    Ok(out)
}
