//! Per-node capabilities and the effective-capacity ordering.
//!
//! The ordering decides which member of a LAN becomes its header and in
//! which order nodes are attached to the distribution tree. It is
//! lexicographic: CPU speed, then free RAM, then processor count, then
//! (inverted) hop distance to the gateway, with the node id as the final
//! tiebreaker so that any set of distinct nodes is strictly ordered.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An address token: a gateway or local address as seen by the node.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Address(String);

impl Address {
    pub fn new(token: impl Into<String>) -> Result<Self, ResourceError> {
        let token = token.into();
        let well_formed = !token.is_empty()
            && token.len() <= 64
            && token
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | ':' | '-' | '_'));
        if well_formed {
            Ok(Address(token))
        } else {
            Err(ResourceError::MalformedAddress(token))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResourceError {
    #[error("malformed address token `{0}`")]
    MalformedAddress(String),
    #[error("node {0} reports zero processors")]
    NoProcessors(NodeId),
    #[error("cannot build a priority queue from an empty node set")]
    EmptyQueue,
    #[error("node {0} appears more than once")]
    DuplicateNode(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeProfile {
    pub node: NodeId,
    /// Bytes.
    pub free_ram: u64,
    /// Hertz.
    pub cpu_speed: u64,
    pub processor_count: u32,
    pub gateway: Address,
    pub local_address: Address,
    /// Hops from the node to its gateway.
    pub hop_distance: u32,
}

impl NodeProfile {
    pub fn validate(&self) -> Result<(), ResourceError> {
        if self.processor_count == 0 {
            return Err(ResourceError::NoProcessors(self.node));
        }
        Ok(())
    }

    pub fn capacity_key(&self) -> CapacityKey {
        CapacityKey {
            cpu_speed: self.cpu_speed,
            free_ram: self.free_ram,
            processor_count: self.processor_count,
            hop_distance: self.hop_distance,
            node: self.node,
        }
    }
}

/// Sort key for effective capacity. `a > b` means `a` belongs higher in the tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CapacityKey {
    pub cpu_speed: u64,
    pub free_ram: u64,
    pub processor_count: u32,
    pub hop_distance: u32,
    pub node: NodeId,
}

impl Ord for CapacityKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cpu_speed
            .cmp(&other.cpu_speed)
            .then(self.free_ram.cmp(&other.free_ram))
            .then(self.processor_count.cmp(&other.processor_count))
            .then(other.hop_distance.cmp(&self.hop_distance))
            .then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for CapacityKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapacityOrder {
    AFirst,
    BFirst,
}

pub fn capacity_order(a: &NodeProfile, b: &NodeProfile) -> CapacityOrder {
    if a.capacity_key() >= b.capacity_key() {
        CapacityOrder::AFirst
    } else {
        CapacityOrder::BFirst
    }
}

/// Orders `profiles` from the most to the least capable node.
pub fn build_priority_queue<'a, I>(profiles: I) -> Result<Vec<NodeId>, ResourceError>
where
    I: IntoIterator<Item = &'a NodeProfile>,
{
    let mut seen = BTreeSet::new();
    let mut heap = BinaryHeap::new();
    for profile in profiles {
        if !seen.insert(profile.node) {
            return Err(ResourceError::DuplicateNode(profile.node));
        }
        heap.push(profile.capacity_key());
    }
    if heap.is_empty() {
        return Err(ResourceError::EmptyQueue);
    }
    Ok(std::iter::from_fn(|| heap.pop().map(|key| key.node)).collect())
}

/// The most capable node among `profiles`, if any.
pub fn most_capable<'a, I>(profiles: I) -> Option<NodeId>
where
    I: IntoIterator<Item = &'a NodeProfile>,
{
    profiles
        .into_iter()
        .map(NodeProfile::capacity_key)
        .max()
        .map(|key| key.node)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::units::{parse_bytes, parse_hertz};
    use proptest::prelude::*;

    pub(crate) fn profile(id: u32, ram: &str, cpu: &str) -> NodeProfile {
        NodeProfile {
            node: NodeId(id),
            free_ram: parse_bytes(ram).unwrap(),
            cpu_speed: parse_hertz(cpu).unwrap(),
            processor_count: 1,
            gateway: Address::new("gw0").unwrap(),
            local_address: Address::new(format!("10.0.0.{id}")).unwrap(),
            hop_distance: 1,
        }
    }

    pub(crate) fn worked_example() -> Vec<NodeProfile> {
        vec![
            profile(1, "1MB", "512MHz"),
            profile(2, "3GB", "2.00GHz"),
            profile(3, "4GB", "2.37GHz"),
            profile(4, "1GB", "1.2GHz"),
        ]
    }

    #[test]
    fn v3_outranks_v2() {
        let profiles = worked_example();
        assert_eq!(capacity_order(&profiles[2], &profiles[1]), CapacityOrder::AFirst);
        assert_eq!(capacity_order(&profiles[1], &profiles[2]), CapacityOrder::BFirst);
    }

    #[test]
    fn identical_profiles_fall_back_to_id() {
        let a = profile(1, "1GB", "1GHz");
        let b = profile(2, "1GB", "1GHz");
        assert_eq!(capacity_order(&a, &b), CapacityOrder::AFirst);
        assert_eq!(capacity_order(&b, &a), CapacityOrder::BFirst);
    }

    #[test]
    fn worked_example_queue() {
        let queue = build_priority_queue(&worked_example()).unwrap();
        assert_eq!(queue, vec![NodeId(3), NodeId(2), NodeId(4), NodeId(1)]);
    }

    #[test]
    fn singleton_and_empty_queue() {
        let one = [profile(9, "1GB", "1GHz")];
        assert_eq!(build_priority_queue(&one).unwrap(), vec![NodeId(9)]);
        assert_eq!(build_priority_queue(&[]), Err(ResourceError::EmptyQueue));
        let dup = [profile(9, "1GB", "1GHz"), profile(9, "2GB", "1GHz")];
        assert_eq!(build_priority_queue(&dup), Err(ResourceError::DuplicateNode(NodeId(9))));
    }

    #[test]
    fn hop_distance_only_breaks_ties() {
        let mut near = profile(5, "1GB", "1GHz");
        let mut far = profile(4, "1GB", "1GHz");
        near.hop_distance = 1;
        far.hop_distance = 3;
        assert_eq!(capacity_order(&near, &far), CapacityOrder::AFirst);
        far.free_ram += 1;
        assert_eq!(capacity_order(&near, &far), CapacityOrder::BFirst);
    }

    #[test]
    fn address_tokens() {
        assert!(Address::new("192.168.1.1").is_ok());
        assert!(Address::new("fe80::1").is_ok());
        assert!(Address::new("").is_err());
        assert!(Address::new("has space").is_err());
        let mut p = profile(1, "1GB", "1GHz");
        p.processor_count = 0;
        assert_eq!(p.validate(), Err(ResourceError::NoProcessors(NodeId(1))));
    }

    pub(crate) fn arb_profile(id: u32) -> impl Strategy<Value = NodeProfile> {
        // Small value ranges so that ties on the leading fields actually occur.
        (0u64..4, 0u64..4, 1u32..3, 0u32..3).prop_map(move |(cpu, ram, procs, hops)| NodeProfile {
            node: NodeId(id),
            free_ram: ram << 30,
            cpu_speed: cpu * 500_000_000,
            processor_count: procs,
            gateway: Address::new("gw").unwrap(),
            local_address: Address::new(format!("h{id}")).unwrap(),
            hop_distance: hops,
        })
    }

    fn arb_profiles(max: usize) -> impl Strategy<Value = Vec<NodeProfile>> {
        (1..=max).prop_flat_map(|n| (0..n as u32).map(arb_profile).collect::<Vec<_>>())
    }

    // Oracle: does `a` beat `b`? Written as an explicit chain of comparisons.
    fn oracle_beats(a: &NodeProfile, b: &NodeProfile) -> bool {
        if a.cpu_speed != b.cpu_speed {
            return a.cpu_speed > b.cpu_speed;
        }
        if a.free_ram != b.free_ram {
            return a.free_ram > b.free_ram;
        }
        if a.processor_count != b.processor_count {
            return a.processor_count > b.processor_count;
        }
        if a.hop_distance != b.hop_distance {
            return a.hop_distance < b.hop_distance;
        }
        a.node < b.node
    }

    // Oracle sort: repeated brute-force maximum extraction.
    fn oracle_queue(profiles: &[NodeProfile]) -> Vec<NodeId> {
        let mut rest: Vec<&NodeProfile> = profiles.iter().collect();
        let mut out = Vec::new();
        while !rest.is_empty() {
            let mut best = 0;
            for i in 1..rest.len() {
                if oracle_beats(rest[i], rest[best]) {
                    best = i;
                }
            }
            out.push(rest.remove(best).node);
        }
        out
    }

    proptest! {
        #[test]
        fn pairwise_order_matches_oracle(profiles in arb_profiles(20)) {
            for a in &profiles {
                for b in &profiles {
                    if a.node == b.node { continue; }
                    let expected = if oracle_beats(a, b) { CapacityOrder::AFirst } else { CapacityOrder::BFirst };
                    prop_assert_eq!(capacity_order(a, b), expected);
                    // Antisymmetry.
                    prop_assert_ne!(capacity_order(a, b), capacity_order(b, a));
                }
            }
        }

        #[test]
        fn transitive_on_triples(profiles in arb_profiles(12)) {
            for a in &profiles { for b in &profiles { for c in &profiles {
                if capacity_order(a, b) == CapacityOrder::AFirst
                    && capacity_order(b, c) == CapacityOrder::AFirst {
                    prop_assert_eq!(capacity_order(a, c), CapacityOrder::AFirst);
                }
            }}}
        }

        #[test]
        fn queue_matches_oracle_sort(profiles in arb_profiles(50)) {
            prop_assert_eq!(build_priority_queue(&profiles).unwrap(), oracle_queue(&profiles));
        }

        #[test]
        fn queue_head_is_argmax(profiles in arb_profiles(100)) {
            let head = build_priority_queue(&profiles).unwrap()[0];
            let argmax = profiles.iter()
                .find(|p| profiles.iter().all(|q| q.node == p.node || oracle_beats(p, q)))
                .unwrap();
            prop_assert_eq!(head, argmax.node);
            prop_assert_eq!(most_capable(&profiles), Some(head));
        }

        #[test]
        fn queue_is_permutation_invariant(profiles in arb_profiles(30), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = profiles.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(build_priority_queue(&profiles).unwrap(), build_priority_queue(&shuffled).unwrap());
        }
    }
}
