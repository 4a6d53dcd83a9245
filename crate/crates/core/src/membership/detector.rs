use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::MembershipError;
use crate::resources::NodeId;

pub const DEFAULT_HEARTBEAT_INTERVAL_MS: u64 = 1000;
/// Silence longer than two intervals marks a peer failed.
pub const DEFAULT_TIMEOUT_MULTIPLIER: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureDetectorState {
    heartbeat_interval_ms: u64,
    timeout_multiplier: u32,
    last_seen: BTreeMap<NodeId, u64>,
}

impl FailureDetectorState {
    pub fn new(heartbeat_interval_ms: u64, timeout_multiplier: u32) -> Result<Self, MembershipError> {
        if heartbeat_interval_ms == 0 {
            return Err(MembershipError::ZeroHeartbeatInterval);
        }
        if timeout_multiplier == 0 {
            return Err(MembershipError::ZeroTimeoutMultiplier);
        }
        Ok(FailureDetectorState {
            heartbeat_interval_ms,
            timeout_multiplier,
            last_seen: BTreeMap::new(),
        })
    }

    pub fn heartbeat_interval_ms(&self) -> u64 {
        self.heartbeat_interval_ms
    }

    pub fn timeout_multiplier(&self) -> u32 {
        self.timeout_multiplier
    }

    pub fn timeout_ms(&self) -> u64 {
        self.heartbeat_interval_ms.saturating_mul(self.timeout_multiplier as u64)
    }

    /// Records that `peer` was heard from at `now`; starts watching it if new.
    pub fn observe(&mut self, peer: NodeId, now: u64) {
        let seen = self.last_seen.entry(peer).or_insert(now);
        *seen = (*seen).max(now);
    }

    pub fn forget(&mut self, peer: NodeId) {
        self.last_seen.remove(&peer);
    }

    pub fn last_seen(&self, peer: NodeId) -> Option<u64> {
        self.last_seen.get(&peer).copied()
    }

    pub fn watched(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.last_seen.keys().copied()
    }

    pub fn is_suspected(&self, peer: NodeId, now: u64) -> bool {
        self.last_seen
            .get(&peer)
            .is_some_and(|&seen| now.saturating_sub(seen) > self.timeout_ms())
    }
}

pub fn detect_failure(state: &FailureDetectorState, now: u64) -> BTreeSet<NodeId> {
    state.watched().filter(|&p| state.is_suspected(p, now)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_heartbeats_raise_nothing() {
        let mut s = FailureDetectorState::new(1000, 3).unwrap();
        s.observe(NodeId(1), 500);
        s.observe(NodeId(2), 900);
        assert!(detect_failure(&s, 1000).is_empty());
    }

    #[test]
    fn boundary_is_exclusive() {
        let mut s = FailureDetectorState::new(1000, 3).unwrap();
        s.observe(NodeId(1), 0);
        assert!(detect_failure(&s, 3000).is_empty());
        assert_eq!(detect_failure(&s, 3001), BTreeSet::from([NodeId(1)]));
    }

    #[test]
    fn observation_never_moves_backwards() {
        let mut s = FailureDetectorState::new(10, 2).unwrap();
        s.observe(NodeId(1), 50);
        s.observe(NodeId(1), 20);
        assert_eq!(s.last_seen(NodeId(1)), Some(50));
        s.forget(NodeId(1));
        assert!(detect_failure(&s, 1_000).is_empty());
        assert_eq!(FailureDetectorState::new(0, 2), Err(MembershipError::ZeroHeartbeatInterval));
        assert_eq!(FailureDetectorState::new(5, 0), Err(MembershipError::ZeroTimeoutMultiplier));
    }
}
