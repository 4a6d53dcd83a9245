//! Deterministic discrete-event simulation of a conference overlay.
//!
//! One run owns a virtual clock, an event queue ordered by (time, sequence),
//! the membership hierarchy, the distribution tree (or the baseline's chain),
//! per-node failure detectors and the conference server. Every message is
//! delayed by the shortest-path delay between its endpoints, scaled by its
//! TOS class, and never overtakes an earlier message on the same directed
//! pair. All randomness comes from one generator seeded by the scenario.

mod queue;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::baseline::{join_sequentially, BaselineOverlay};
use crate::conference::{ConferenceError, ConferenceServer, Notice};
use crate::membership::{
    detect_failure, graceful_leave, plan_join, reconcile_leaders, select_leader, ClusterBounds,
    FailureDetectorState, Hierarchy, JoinPlan, MembershipError, MembershipMessage, Payload,
};
use crate::metrics::{MetricsError, MetricsReport, PacketTrace, Protocol};
use crate::resources::{build_priority_queue, Address, NodeId, NodeProfile};
use crate::scenario::{Action, Scenario};
use crate::tree::{
    build_tree, compute_fanout_threshold, elect_headers, needs_tree, replace_failed_interior, FanoutThreshold,
    OverlayTree, TreeError,
};
use crate::underlay::{DelayMatrix, TosValue};

pub use queue::{EventQueue, Seq};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("no quiescence within {events} events (simulated time {time} ms)")]
    Livelock { events: u64, time: u64 },
    #[error("tree: {0}")]
    Tree(#[from] TreeError),
    #[error("membership: {0}")]
    Membership(#[from] MembershipError),
    #[error("conference setup: {0}")]
    Conference(#[from] ConferenceError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
}

/// How one crash was noticed and repaired.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryRecord {
    pub node: NodeId,
    /// `None` when a live node was suspected.
    pub crashed_at: Option<u64>,
    pub detected_at: Option<u64>,
    pub detected_by: Option<NodeId>,
    /// When the last repair message (tree reattachment or leader transfer) arrived.
    pub reconnected_at: Option<u64>,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub log: Vec<String>,
    pub metrics: MetricsReport,
    pub tree_dump: String,
    /// The data path at the end: the distribution tree, or the baseline chain from the root.
    pub final_tree: Option<OverlayTree>,
    pub hierarchy: Hierarchy,
    pub recoveries: Vec<RecoveryRecord>,
    pub traces: Vec<PacketTrace>,
    pub server: ConferenceServer,
    /// Members that are neither crashed nor departed.
    pub survivors: BTreeSet<NodeId>,
    /// Members the distribution tree had no room for at the end of the run.
    pub unplaced: BTreeSet<NodeId>,
    pub end_time: u64,
    pub events: u64,
    /// False when the run stopped at the scenario's end time with work pending.
    pub quiesced: bool,
}

impl SimOutcome {
    pub fn log_text(&self) -> String {
        let mut s = self.log.join("\n");
        if !s.is_empty() {
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone)]
enum Body {
    Membership(Payload),
    Data { packet: usize },
    Reattach,
}

#[derive(Debug, Clone)]
struct Envelope {
    id: u64,
    from: NodeId,
    to: NodeId,
    body: Body,
    logged: bool,
}

#[derive(Debug, Clone, Copy)]
enum Timer {
    Heartbeat { generation: u64 },
    Check { generation: u64 },
    JoinTimeout { attempt: u32 },
}

#[derive(Debug, Clone)]
enum Event {
    Deliver(Envelope),
    Timer(NodeId, Timer),
    Stream(usize),
    Script(usize),
}

struct JoinState {
    plan: JoinPlan,
    phase: usize,
    waiting: BTreeSet<NodeId>,
    attempt: u32,
    timeout: Seq,
}

struct Stream {
    source: Option<NodeId>,
    end: u64,
    interval: u64,
    tos: TosValue,
    next_seq: u64,
}

#[derive(Clone, Copy)]
enum Change {
    Joined,
    Departed(NodeId),
}

fn n(node: NodeId) -> String {
    format!("n{node}")
}

struct Simulation<'a> {
    scenario: &'a Scenario,
    protocol: Protocol,
    dist: DelayMatrix,
    lan_of: BTreeMap<NodeId, Address>,
    threshold: FanoutThreshold,
    rng: ChaCha8Rng,

    queue: EventQueue<(Event, bool)>,
    cancelled: BTreeSet<Seq>,
    work: usize,
    now: u64,
    events: u64,
    log: Vec<String>,

    hierarchy: Hierarchy,
    view_version: u64,
    started: bool,
    tree: Option<OverlayTree>,
    /// Members left out of `tree` by the placement rules.
    unplaced: BTreeSet<NodeId>,
    detectors: BTreeMap<NodeId, FailureDetectorState>,
    generation: BTreeMap<NodeId, u64>,
    crashed: BTreeSet<NodeId>,
    departed: BTreeSet<NodeId>,
    joins: BTreeMap<NodeId, JoinState>,

    last_arrival: BTreeMap<(NodeId, NodeId), u64>,
    next_message: u64,

    streams: Vec<Stream>,
    traces: Vec<PacketTrace>,
    seen: Vec<BTreeSet<NodeId>>,
    chains: Vec<Vec<NodeId>>,
    packet_tos: Vec<TosValue>,
    chain_cache: Option<(u64, NodeId, Vec<NodeId>)>,

    server: ConferenceServer,

    recoveries: Vec<RecoveryRecord>,
    awaiting_detection: BTreeMap<NodeId, usize>,
    tracked: BTreeMap<u64, usize>,
    outstanding: BTreeMap<usize, usize>,
}

/// Runs `scenario` with its own protocol and seed.
pub fn run(scenario: &Scenario) -> Result<SimOutcome, SimError> {
    run_with(scenario, scenario.parameters.protocol, scenario.parameters.seed)
}

pub fn run_with(scenario: &Scenario, protocol: Protocol, seed: u64) -> Result<SimOutcome, SimError> {
    let mut sim = Simulation::new(scenario, protocol, seed)?;
    let quiesced = sim.run()?;
    sim.finish(quiesced)
}

impl<'a> Simulation<'a> {
    fn new(scenario: &'a Scenario, protocol: Protocol, seed: u64) -> Result<Self, SimError> {
        let params = &scenario.parameters;
        let bounds = ClusterBounds::new(params.k)?;
        let threshold = compute_fanout_threshold(scenario.bandwidth.free.0, scenario.bandwidth.application.0)?;
        let mut server = ConferenceServer::new(scenario.conference.credentials(), params.log_spectator_leave);
        for state in scenario.conference.states() {
            server.create_conference(state)?;
        }
        let dist = scenario.topology.delay_matrix();
        let mut sim = Simulation {
            scenario,
            protocol,
            lan_of: scenario.profiles.iter().map(|p| (p.node, p.gateway.clone())).collect(),
            threshold,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: EventQueue::default(),
            cancelled: BTreeSet::new(),
            work: 0,
            now: 0,
            events: 0,
            log: Vec::new(),
            hierarchy: Hierarchy::new(bounds),
            view_version: 0,
            started: false,
            tree: None,
            unplaced: BTreeSet::new(),
            detectors: BTreeMap::new(),
            generation: BTreeMap::new(),
            crashed: BTreeSet::new(),
            departed: BTreeSet::new(),
            joins: BTreeMap::new(),
            last_arrival: BTreeMap::new(),
            next_message: 0,
            streams: Vec::new(),
            traces: Vec::new(),
            seen: Vec::new(),
            chains: Vec::new(),
            packet_tos: Vec::new(),
            chain_cache: None,
            server,
            recoveries: Vec::new(),
            awaiting_detection: BTreeMap::new(),
            tracked: BTreeMap::new(),
            outstanding: BTreeMap::new(),
            dist,
        };
        for (i, entry) in scenario.script.iter().enumerate() {
            sim.schedule(entry.at_ms, Event::Script(i), true);
        }
        sim.bootstrap(bounds)?;
        Ok(sim)
    }

    /// Initial members start organized: the protocol's own clustering, no messages.
    fn bootstrap(&mut self, bounds: ClusterBounds) -> Result<(), SimError> {
        let members = &self.scenario.initial_members;
        if members.is_empty() {
            return Ok(());
        }
        self.hierarchy = match self.protocol {
            Protocol::Nice => join_sequentially(members.iter().copied(), bounds, &self.dist)?,
            Protocol::Netrawalm => {
                let profiles = self.profiles_of(members);
                let headers = elect_headers(&profiles, &self.scenario.topology)?;
                let mut lans: BTreeMap<Address, BTreeSet<NodeId>> = BTreeMap::new();
                for p in &profiles {
                    lans.entry(p.gateway.clone()).or_default().insert(p.node);
                }
                let clusters = lans.into_iter().map(|(gw, m)| (m, headers[&gw]));
                Hierarchy::from_clusters(bounds, clusters, &self.dist)?
            }
        };
        for &m in members {
            self.member_added(m);
        }
        self.refresh_watches();
        Ok(())
    }

    fn profiles_of(&self, nodes: &BTreeSet<NodeId>) -> Vec<NodeProfile> {
        self.scenario.profiles.iter().filter(|p| nodes.contains(&p.node)).cloned().collect()
    }

    fn heartbeat_interval(&self) -> u64 {
        self.scenario.parameters.heartbeat_interval_ms
    }

    fn check_period(&self) -> u64 {
        (self.heartbeat_interval() / 4).max(1)
    }

    fn schedule(&mut self, time: u64, event: Event, work: bool) -> Seq {
        if work {
            self.work += 1;
        }
        self.queue.push(time, (event, work))
    }

    fn cancel(&mut self, seq: Seq) {
        if self.cancelled.insert(seq) {
            self.work -= 1;
        }
    }

    fn emit(&mut self, kind: &str, from: &str, to: &str, detail: impl AsRef<str>) {
        let detail = detail.as_ref();
        let detail = if detail.is_empty() { "-" } else { detail };
        self.log.push(format!("{} {kind} {from} {to} {detail}", self.now));
    }

    fn quiescent(&self) -> bool {
        self.work == 0 && self.awaiting_detection.is_empty() && self.outstanding.is_empty()
    }

    fn run(&mut self) -> Result<bool, SimError> {
        let end = self.scenario.parameters.end_time_ms;
        let budget = self.scenario.parameters.event_budget;
        loop {
            if self.quiescent() {
                return Ok(true);
            }
            let Some(next) = self.queue.peek_time() else {
                return Ok(true);
            };
            if end.is_some_and(|end| next > end) {
                return Ok(false);
            }
            let (time, seq, (event, work)) = self.queue.pop().expect("peeked");
            if self.cancelled.remove(&seq) {
                continue;
            }
            if work {
                self.work -= 1;
            }
            self.events += 1;
            if self.events > budget {
                return Err(SimError::Livelock {
                    events: self.events,
                    time,
                });
            }
            debug_assert!(time >= self.now, "clock runs forward");
            self.now = time;
            match event {
                Event::Deliver(env) => self.deliver(env)?,
                Event::Timer(owner, timer) => self.timer(owner, timer)?,
                Event::Stream(i) => self.stream_tick(i),
                Event::Script(i) => self.script(i)?,
            }
        }
    }

    // Messaging

    fn send(&mut self, from: NodeId, to: NodeId, body: Body, tos: TosValue, work: bool, recovery: Option<usize>) {
        let id = self.next_message;
        self.next_message += 1;
        let logged = !matches!(body, Body::Membership(Payload::HeartBeat { .. }))
            || self.scenario.parameters.log_heartbeats;
        let env = Envelope {
            id,
            from,
            to,
            body,
            logged,
        };
        if logged {
            let detail = self.describe(&env);
            self.emit("send", &n(from), &n(to), detail);
        }
        let delay = self.scenario.tos_delay.apply(self.dist.get(from, to), tos);
        let last = self.last_arrival.entry((from, to)).or_insert(0);
        let at = (self.now + delay).max(*last);
        *last = at;
        if let Some(r) = recovery {
            self.tracked.insert(id, r);
            *self.outstanding.entry(r).or_insert(0) += 1;
        }
        self.schedule(at, Event::Deliver(env), work);
    }

    fn send_membership(&mut self, m: MembershipMessage, recovery: Option<usize>) {
        self.send(m.sender, m.receiver, Body::Membership(m.payload), TosValue::ROUTINE, true, recovery);
    }

    fn describe(&self, env: &Envelope) -> String {
        match &env.body {
            Body::Membership(p) => {
                let kind = MembershipMessage::new(env.from, env.to, p.clone()).kind();
                format!("#{} {kind} {p}", env.id)
            }
            Body::Data { packet } => {
                let t = &self.traces[*packet];
                format!("#{} Data source={} seq={}", env.id, t.source, t.seq)
            }
            Body::Reattach => format!("#{} Reattach parent={}", env.id, env.from),
        }
    }

    fn settle(&mut self, id: u64) {
        let Some(r) = self.tracked.remove(&id) else {
            return;
        };
        let left = self.outstanding.get_mut(&r).expect("tracked recovery");
        *left -= 1;
        if *left == 0 {
            self.outstanding.remove(&r);
            self.finish_recovery(r);
        }
    }

    fn deliver(&mut self, env: Envelope) -> Result<(), SimError> {
        let reason = if self.crashed.contains(&env.to) {
            Some("crash")
        } else if self.departed.contains(&env.to) {
            Some("departed")
        } else {
            None
        };
        if env.logged {
            let detail = self.describe(&env);
            match reason {
                Some(r) => self.emit("drop", &n(env.from), &n(env.to), format!("{detail} reason={r}")),
                None => self.emit("deliver", &n(env.from), &n(env.to), detail),
            }
        }
        self.settle(env.id);
        if reason.is_some() {
            return Ok(());
        }
        match env.body {
            Body::Membership(Payload::HeartBeat { .. }) => {
                if let Some(det) = self.detectors.get_mut(&env.to) {
                    if det.last_seen(env.from).is_some() {
                        det.observe(env.from, self.now);
                    }
                }
            }
            Body::Membership(Payload::JoinQuery(_)) => self.answer_join_query(env.from, env.to),
            Body::Membership(Payload::JoinResponse { .. }) => self.join_response(env.to, env.from)?,
            Body::Membership(Payload::Remove { .. } | Payload::LeaderTransfer { .. }) | Body::Reattach => {}
            Body::Data { packet } => {
                if self.seen[packet].insert(env.to) {
                    self.traces[packet].delivered.insert(env.to, env.from);
                    self.forward(packet, env.to, Some(env.from));
                }
            }
        }
        Ok(())
    }

    // Timers

    fn member_added(&mut self, node: NodeId) {
        let generation = self.generation.entry(node).or_insert(0);
        *generation += 1;
        let generation = *generation;
        let interval = self.heartbeat_interval();
        let det = FailureDetectorState::new(interval, self.scenario.parameters.timeout_multiplier)
            .expect("validated parameters");
        self.detectors.insert(node, det);
        let beat = self.now + self.rng.gen_range(0..interval);
        let check = self.now + self.rng.gen_range(0..self.check_period());
        self.schedule(beat, Event::Timer(node, Timer::Heartbeat { generation }), false);
        self.schedule(check, Event::Timer(node, Timer::Check { generation }), false);
    }

    fn retire(&mut self, node: NodeId) {
        *self.generation.entry(node).or_insert(0) += 1;
        self.detectors.remove(&node);
        if let Some(join) = self.joins.remove(&node) {
            self.cancel(join.timeout);
        }
    }

    fn current(&self, node: NodeId, generation: u64) -> bool {
        self.generation.get(&node) == Some(&generation) && !self.crashed.contains(&node) && self.hierarchy.contains(node)
    }

    fn peers_of(&self, node: NodeId) -> BTreeSet<NodeId> {
        self.hierarchy
            .clusters_containing(node)
            .into_iter()
            .flat_map(|c| c.members().iter().copied())
            .filter(|&m| m != node)
            .collect()
    }

    /// Each live member watches exactly its cluster peers.
    fn refresh_watches(&mut self) {
        let now = self.now;
        for m in self.hierarchy.members() {
            if self.crashed.contains(&m) {
                continue;
            }
            let peers = self.peers_of(m);
            let Some(det) = self.detectors.get_mut(&m) else {
                continue;
            };
            let stale: Vec<NodeId> = det.watched().filter(|p| !peers.contains(p)).collect();
            for p in stale {
                det.forget(p);
            }
            for &p in &peers {
                if det.last_seen(p).is_none() {
                    det.observe(p, now);
                }
            }
        }
    }

    fn timer(&mut self, owner: NodeId, timer: Timer) -> Result<(), SimError> {
        match timer {
            Timer::Heartbeat { generation } => {
                if !self.current(owner, generation) {
                    return Ok(());
                }
                let version = self.view_version;
                for p in self.peers_of(owner) {
                    let body = Body::Membership(Payload::HeartBeat { view_version: version });
                    self.send(owner, p, body, TosValue::ROUTINE, false, None);
                }
                let next = self.now + self.heartbeat_interval();
                self.schedule(next, Event::Timer(owner, timer), false);
            }
            Timer::Check { generation } => {
                if !self.current(owner, generation) {
                    return Ok(());
                }
                let suspects = detect_failure(&self.detectors[&owner], self.now);
                for s in suspects {
                    if self.hierarchy.contains(s) && self.current(owner, generation) {
                        self.handle_failure(s, owner)?;
                    }
                }
                let next = self.now + self.check_period();
                self.schedule(next, Event::Timer(owner, timer), false);
            }
            Timer::JoinTimeout { attempt } => {
                if self.joins.get(&owner).is_some_and(|j| j.attempt == attempt) {
                    self.joins.remove(&owner);
                    self.retry_join(owner, attempt)?;
                }
            }
        }
        Ok(())
    }

    // Script

    fn script(&mut self, index: usize) -> Result<(), SimError> {
        let action = self.scenario.script[index].action.clone();
        let from = action.nodes().first().map_or_else(|| "-".to_string(), |&x| n(x));
        self.emit("script", &from, "-", action.name());
        if let Some((sender, message)) = action.control() {
            if self.crashed.contains(&sender) {
                self.emit("ignored", &n(sender), "server", "reason=crashed");
                return Ok(());
            }
            self.emit("control", &n(sender), "server", format!("{} {}", message.kind(), message.summary()));
            match self.server.handle(sender, &message) {
                Ok(notices) => self.log_notices(&notices),
                Err(e) => self.emit("reject", "server", &n(sender), e.to_string()),
            }
            return Ok(());
        }
        match action {
            Action::Join { node } => {
                if self.hierarchy.contains(node) || self.joins.contains_key(&node) || self.crashed.contains(&node) {
                    self.emit("ignored", &n(node), "-", "reason=not_eligible");
                } else {
                    self.departed.remove(&node);
                    self.start_join(node, 0)?;
                }
            }
            Action::Leave { node } => self.leave(node)?,
            Action::Crash { node } => self.crash(node)?,
            Action::StartConference => {
                if !self.started {
                    self.started = true;
                    self.update_tree(Change::Joined, None)?;
                }
            }
            Action::SendStream {
                source,
                duration_ms,
                packet_interval_ms,
                tos,
            } => {
                if !self.started {
                    self.started = true;
                    self.update_tree(Change::Joined, None)?;
                }
                self.streams.push(Stream {
                    source,
                    end: self.now + duration_ms,
                    interval: packet_interval_ms,
                    tos,
                    next_seq: 0,
                });
                let i = self.streams.len() - 1;
                self.schedule(self.now, Event::Stream(i), true);
            }
            Action::SetBandwidth { free, application } => {
                let free = free.unwrap_or(self.scenario.bandwidth.free).0;
                let app = application.unwrap_or(self.scenario.bandwidth.application).0;
                self.threshold = compute_fanout_threshold(free, app)?;
                self.emit("bandwidth", "-", "-", format!("p={}", self.threshold.p()));
                if self.started {
                    self.update_tree(Change::Joined, None)?;
                }
            }
            _ => unreachable!("control actions handled above"),
        }
        Ok(())
    }

    fn log_notices(&mut self, notices: &[Notice]) {
        for notice in notices {
            self.emit("notice", "server", &n(notice.recipient()), format!("{} {}", notice.kind(), notice.summary()));
        }
    }

    // Joining

    fn start_join(&mut self, node: NodeId, attempt: u32) -> Result<(), SimError> {
        let plan = plan_join(&self.hierarchy, node, &self.dist)?;
        if plan.phases.is_empty() {
            return self.admit(node, plan.leader);
        }
        let wait = 2 * self.heartbeat_interval() * self.scenario.parameters.timeout_multiplier as u64;
        let timeout = self.schedule(self.now + wait, Event::Timer(node, Timer::JoinTimeout { attempt }), true);
        self.joins.insert(
            node,
            JoinState {
                plan,
                phase: 0,
                waiting: BTreeSet::new(),
                attempt,
                timeout,
            },
        );
        self.send_phase(node);
        Ok(())
    }

    fn send_phase(&mut self, node: NodeId) {
        let join = self.joins.get_mut(&node).expect("join in progress");
        let queries: Vec<MembershipMessage> = join.plan.phases[join.phase].iter().map(|(q, _)| q.clone()).collect();
        join.waiting = queries.iter().map(|q| q.receiver).collect();
        for q in queries {
            self.send_membership(q, None);
        }
    }

    fn answer_join_query(&mut self, joiner: NodeId, at: NodeId) {
        let Some(join) = self.joins.get(&joiner) else {
            return;
        };
        let response = join.plan.phases[join.phase]
            .iter()
            .find(|(q, _)| q.receiver == at)
            .map(|(_, r)| r.clone());
        if let Some(r) = response {
            self.send_membership(r, None);
        }
    }

    fn join_response(&mut self, joiner: NodeId, from: NodeId) -> Result<(), SimError> {
        let Some(join) = self.joins.get_mut(&joiner) else {
            return Ok(());
        };
        if !join.waiting.remove(&from) || !join.waiting.is_empty() {
            return Ok(());
        }
        join.phase += 1;
        if join.phase < join.plan.phases.len() {
            self.send_phase(joiner);
            return Ok(());
        }
        let join = self.joins.remove(&joiner).expect("present");
        self.cancel(join.timeout);
        if self.hierarchy.contains(join.plan.leader) {
            self.admit(joiner, join.plan.leader)
        } else {
            self.retry_join(joiner, join.attempt)
        }
    }

    fn retry_join(&mut self, node: NodeId, attempt: u32) -> Result<(), SimError> {
        if attempt < self.scenario.parameters.join_retries {
            self.emit("join_retry", &n(node), "-", format!("attempt={}", attempt + 1));
            self.start_join(node, attempt + 1)
        } else {
            self.emit("join_failed", &n(node), "-", format!("attempts={}", attempt + 1));
            Ok(())
        }
    }

    fn admit(&mut self, node: NodeId, leader: NodeId) -> Result<(), SimError> {
        self.hierarchy.insert(node, leader, &self.dist)?;
        self.emit("joined", &n(node), &n(leader), "layer=0");
        self.member_added(node);
        self.membership_changed(Change::Joined, None)
    }

    fn membership_changed(&mut self, change: Change, recovery: Option<usize>) -> Result<(), SimError> {
        self.view_version += 1;
        self.refresh_watches();
        if self.started {
            self.update_tree(change, recovery)?;
        }
        Ok(())
    }

    // Leaving and failing

    fn leave(&mut self, node: NodeId) -> Result<(), SimError> {
        if self.joins.contains_key(&node) {
            self.retire(node);
            self.departed.insert(node);
            return Ok(());
        }
        if !self.hierarchy.contains(node) || self.crashed.contains(&node) {
            self.emit("ignored", &n(node), "-", "reason=not_member");
            return Ok(());
        }
        let messages = graceful_leave(&self.hierarchy, node, &self.dist)?;
        self.hierarchy.remove(node, &self.dist)?;
        for m in messages {
            self.send_membership(m, None);
        }
        self.retire(node);
        self.departed.insert(node);
        let notices = self.server.disconnect(node);
        self.log_notices(&notices);
        self.membership_changed(Change::Departed(node), None)
    }

    fn crash(&mut self, node: NodeId) -> Result<(), SimError> {
        if self.crashed.contains(&node) || self.departed.contains(&node) {
            self.emit("ignored", &n(node), "-", "reason=not_running");
            return Ok(());
        }
        self.retire(node);
        self.crashed.insert(node);
        if !self.hierarchy.contains(node) {
            return Ok(());
        }
        if self.hierarchy.len() == 1 {
            // Nobody is left to notice.
            self.hierarchy.remove(node, &self.dist)?;
            return self.membership_changed(Change::Departed(node), None);
        }
        self.recoveries.push(RecoveryRecord {
            node,
            crashed_at: Some(self.now),
            detected_at: None,
            detected_by: None,
            reconnected_at: None,
        });
        self.awaiting_detection.insert(node, self.recoveries.len() - 1);
        Ok(())
    }

    /// `by` stopped hearing from `failed`. The detector nominates itself for
    /// every cluster `failed` led; a rival candidate triggers reconciliation.
    fn handle_failure(&mut self, failed: NodeId, by: NodeId) -> Result<(), SimError> {
        let silent = self.detectors[&by].last_seen(failed).map_or(0, |t| self.now - t);
        self.emit("detect", &n(by), &n(failed), format!("silent_ms={silent}"));
        let r = match self.awaiting_detection.remove(&failed) {
            Some(r) => r,
            None => {
                self.recoveries.push(RecoveryRecord {
                    node: failed,
                    crashed_at: None,
                    detected_at: None,
                    detected_by: None,
                    reconnected_at: None,
                });
                self.recoveries.len() - 1
            }
        };
        self.recoveries[r].detected_at = Some(self.now);
        self.recoveries[r].detected_by = Some(by);
        self.outstanding.insert(r, 0);

        let mut transfers = Vec::new();
        let dist = &self.dist;
        self.hierarchy.remove_with(failed, dist, &mut |layer, members| {
            let natural = select_leader(members, dist).expect("non-empty cluster");
            if members.contains(&by) && by != natural {
                let rec = reconcile_leaders(layer, by, members, natural, members, dist).expect("both candidates are members");
                transfers.extend(rec.messages);
                rec.winner
            } else {
                natural
            }
        })?;
        for m in transfers {
            self.send_membership(m, Some(r));
        }
        self.retire(failed);
        if !self.crashed.contains(&failed) {
            self.departed.insert(failed);
        }
        let notices = self.server.disconnect(failed);
        self.log_notices(&notices);
        self.membership_changed(Change::Departed(failed), Some(r))?;
        if self.outstanding.get(&r) == Some(&0) {
            self.outstanding.remove(&r);
            self.finish_recovery(r);
        }
        Ok(())
    }

    fn finish_recovery(&mut self, r: usize) {
        let rec = &mut self.recoveries[r];
        rec.reconnected_at = Some(self.now);
        let node = rec.node;
        let detect = rec.crashed_at.map_or(0, |c| rec.detected_at.unwrap_or(self.now) - c);
        let total = rec.crashed_at.map_or(0, |c| self.now - c);
        self.emit("recovered", &n(node), "-", format!("detect_ms={detect} total_ms={total}"));
    }

    // Distribution tree

    fn update_tree(&mut self, change: Change, recovery: Option<usize>) -> Result<(), SimError> {
        if self.protocol == Protocol::Nice {
            return Ok(());
        }
        let members = self.hierarchy.members();
        let next = if members.is_empty() || !needs_tree(members.len(), &self.threshold) {
            None
        } else {
            let repairable = match (change, &self.tree) {
                (Change::Departed(x), Some(old)) => {
                    old.contains(x)
                        && old.root() != x
                        && old.len() == members.difference(&self.unplaced).count() + 1
                }
                _ => false,
            };
            match (change, &self.tree) {
                (Change::Departed(x), Some(old)) if repairable => {
                    match replace_failed_interior(old, x, &self.scenario.profiles) {
                        Ok(t) => Some(t),
                        Err(TreeError::PlacementFailed(_)) => Some(self.build(&members)?),
                        Err(e) => return Err(e.into()),
                    }
                }
                _ => Some(self.build(&members)?),
            }
        };
        let placed: BTreeSet<NodeId> = next.as_ref().map_or_else(|| members.clone(), |t| t.members().collect());
        let unplaced: BTreeSet<NodeId> = members.difference(&placed).copied().collect();
        for &x in unplaced.difference(&self.unplaced.clone()) {
            self.emit("reject", "tree", &n(x), "placement");
        }
        self.unplaced = unplaced;
        if next == self.tree {
            return Ok(());
        }
        match &next {
            Some(t) => {
                let detail = format!("nodes={} height={} fanout={}", t.len(), t.height(), t.fanout());
                self.emit("tree", &n(t.root()), "-", detail);
            }
            None => self.emit("tree", "-", "-", format!("mesh nodes={}", members.len())),
        }
        let old = std::mem::replace(&mut self.tree, next);
        if let Some(t) = self.tree.clone() {
            for node in t.preorder() {
                if let Some(parent) = t.parent(node) {
                    if old.as_ref().and_then(|o| o.parent(node)) != Some(parent) {
                        self.send(parent, node, Body::Reattach, TosValue::ROUTINE, true, recovery);
                    }
                }
            }
        }
        Ok(())
    }

    /// Builds over `members`, leaving out each member the placement rules reject.
    fn build(&self, members: &BTreeSet<NodeId>) -> Result<OverlayTree, SimError> {
        let mut profiles = self.profiles_of(members);
        loop {
            match build_tree(&profiles, &self.scenario.topology, &self.threshold) {
                Err(TreeError::PlacementFailed(x)) => profiles.retain(|p| p.node != x),
                built => return Ok(built?),
            }
        }
    }

    // Data plane

    /// The stream source when none is named: the tree root, or the most
    /// capable member when there is no tree.
    fn default_source(&self) -> Option<NodeId> {
        if let Some(t) = &self.tree {
            return Some(t.root());
        }
        let members = self.hierarchy.members();
        let profiles = self.profiles_of(&members);
        build_priority_queue(&profiles).ok().map(|q| q[0])
    }

    fn stream_tick(&mut self, i: usize) {
        let stream = &self.streams[i];
        if self.now >= stream.end {
            return;
        }
        let (tos, interval, end, named) = (stream.tos, stream.interval, stream.end, stream.source);
        let seq = stream.next_seq;
        self.streams[i].next_seq += 1;
        match named.or_else(|| self.default_source()) {
            Some(src) if self.hierarchy.contains(src) && !self.crashed.contains(&src) => self.send_packet(src, seq, tos),
            Some(src) => self.emit("drop", &n(src), "-", format!("Data seq={seq} reason=source_down")),
            None => self.emit("drop", "-", "-", format!("Data seq={seq} reason=no_members")),
        }
        if self.now + interval < end {
            self.schedule(self.now + interval, Event::Stream(i), true);
        }
    }

    fn send_packet(&mut self, source: NodeId, seq: u64, tos: TosValue) {
        let expected: BTreeSet<NodeId> = self
            .hierarchy
            .members()
            .into_iter()
            .filter(|&m| m != source && !(self.protocol == Protocol::Netrawalm && self.unplaced.contains(&m)))
            .collect();
        let packet = self.traces.len();
        self.traces.push(PacketTrace::new(source, seq, expected));
        self.seen.push(BTreeSet::from([source]));
        let chain = match self.protocol {
            Protocol::Nice => self.chain_from(source),
            Protocol::Netrawalm => Vec::new(),
        };
        self.chains.push(chain);
        self.packet_tos.push(tos);
        self.forward(packet, source, None);
    }

    fn chain_from(&mut self, source: NodeId) -> Vec<NodeId> {
        if let Some((version, src, chain)) = &self.chain_cache {
            if *version == self.view_version && *src == source {
                return chain.clone();
            }
        }
        let overlay = BaselineOverlay::from_hierarchy(self.hierarchy.clone(), self.lan_of.clone());
        let chain = overlay.data_path(source, &self.dist);
        self.chain_cache = Some((self.view_version, source, chain.clone()));
        chain
    }

    fn forward(&mut self, packet: usize, at: NodeId, came_from: Option<NodeId>) {
        let targets: Vec<NodeId> = match self.protocol {
            Protocol::Nice => {
                let chain = &self.chains[packet];
                chain
                    .iter()
                    .position(|&x| x == at)
                    .and_then(|i| chain.get(i + 1))
                    .copied()
                    .into_iter()
                    .collect()
            }
            Protocol::Netrawalm => match &self.tree {
                Some(t) if t.contains(at) => t
                    .parent(at)
                    .into_iter()
                    .chain(t.children(at).iter().copied())
                    .filter(|&x| Some(x) != came_from)
                    .collect(),
                Some(_) => Vec::new(),
                None if came_from.is_none() => self.traces[packet].expected.iter().copied().collect(),
                None => Vec::new(),
            },
        };
        let loss = self.scenario.parameters.loss_rate;
        let tos = self.packet_tos[packet];
        for to in targets {
            self.traces[packet].hops.push((at, to));
            if loss > 0.0 && self.rng.gen::<f64>() < loss {
                let t = &self.traces[packet];
                let detail = format!("Data source={} seq={} reason=loss", t.source, t.seq);
                self.emit("drop", &n(at), &n(to), detail);
                continue;
            }
            self.send(at, to, Body::Data { packet }, tos, true, None);
        }
    }

    fn finish(self, quiesced: bool) -> Result<SimOutcome, SimError> {
        let s = self.scenario;
        let metrics = MetricsReport::from_traces(
            &s.name,
            self.protocol,
            s.node_count(),
            &self.traces,
            &s.topology,
            s.parameters.metric,
        )?;
        let final_tree = match self.protocol {
            Protocol::Netrawalm => self.tree.clone(),
            Protocol::Nice => self.default_source().map(|root| {
                BaselineOverlay::from_hierarchy(self.hierarchy.clone(), self.lan_of.clone()).data_tree(root, &self.dist)
            }),
        };
        let tree_dump = match &final_tree {
            Some(t) => t.dump(),
            None => {
                let members: Vec<String> = self.hierarchy.members().iter().map(|m| m.to_string()).collect();
                format!("# mesh\n{}\n", members.join(" "))
            }
        };
        let survivors = self
            .hierarchy
            .members()
            .into_iter()
            .filter(|m| !self.crashed.contains(m))
            .collect();
        Ok(SimOutcome {
            log: self.log,
            metrics,
            tree_dump,
            final_tree,
            hierarchy: self.hierarchy,
            recoveries: self.recoveries,
            traces: self.traces,
            server: self.server,
            survivors,
            unplaced: self.unplaced,
            end_time: self.now,
            events: self.events,
            quiesced,
        })
    }
}
