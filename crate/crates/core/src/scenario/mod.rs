//! Scenario files: one TOML document describing the underlay, the nodes,
//! bandwidth, conference accounts, run parameters and a timed script.
//!
//! Parsing goes through a raw serde layer that rejects unknown keys, then a
//! validation pass that resolves every cross-reference and reports all
//! problems it finds with their line numbers.

mod generate;
mod goldens;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::Spanned;

use crate::conference::{ConferenceState, ControlMessage, KeyToken, UserName};
use crate::membership::{ClusterBounds, DEFAULT_CLUSTER_K, DEFAULT_HEARTBEAT_INTERVAL_MS, DEFAULT_TIMEOUT_MULTIPLIER};
use crate::metrics::Protocol;
use crate::resources::{Address, NodeId, NodeProfile};
use crate::tree::compute_fanout_threshold;
use crate::underlay::{Endpoint, PathMetric, TopologyBuilder, TosDelayProfile, TosValue, UnderlayTopology};
use crate::units::{format_bitrate, format_bytes, format_hertz, parse_bitrate, parse_bytes, parse_hertz};

pub use generate::{random_scenario, sweep_scenario, GeneratorConfig};
pub use goldens::{golden, golden_names, golden_source, GOLDENS};

/// Media packets leave the source every 40 ms unless a stream says otherwise.
pub const DEFAULT_PACKET_INTERVAL_MS: u64 = 40;
pub const DEFAULT_EVENT_BUDGET: u64 = 5_000_000;
pub const DEFAULT_JOIN_RETRIES: u32 = 3;

/// A problem found while validating, with the 1-based line it points at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Syntax(String),
    #[error("{}", render_diagnostics(.0))]
    Invalid(Vec<Diagnostic>),
}

fn render_diagnostics(diags: &[Diagnostic]) -> String {
    diags.iter().map(Diagnostic::to_string).collect::<Vec<_>>().join("\n")
}

/// A bandwidth written with units, such as `512kbps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Bitrate(pub u64);

impl TryFrom<String> for Bitrate {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        parse_bitrate(&s).map(Bitrate).map_err(|e| e.to_string())
    }
}

impl From<Bitrate> for String {
    fn from(b: Bitrate) -> String {
        format_bitrate(b.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Parameters {
    pub k: usize,
    pub heartbeat_interval_ms: u64,
    pub timeout_multiplier: u32,
    pub seed: u64,
    pub protocol: Protocol,
    /// Path metric for stretch.
    pub metric: PathMetric,
    /// Probability that a data packet copy is lost in transit.
    pub loss_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub end_time_ms: Option<u64>,
    pub event_budget: u64,
    pub join_retries: u32,
    pub log_heartbeats: bool,
    pub log_spectator_leave: bool,
}

impl Default for Parameters {
    fn default() -> Self {
        Parameters {
            k: DEFAULT_CLUSTER_K,
            heartbeat_interval_ms: DEFAULT_HEARTBEAT_INTERVAL_MS,
            timeout_multiplier: DEFAULT_TIMEOUT_MULTIPLIER,
            seed: 0,
            protocol: Protocol::Netrawalm,
            metric: PathMetric::Delay,
            loss_rate: 0.0,
            end_time_ms: None,
            event_budget: DEFAULT_EVENT_BUDGET,
            join_retries: DEFAULT_JOIN_RETRIES,
            log_heartbeats: false,
            log_spectator_leave: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bandwidth {
    pub network_capacity: Bitrate,
    pub free: Bitrate,
    pub application: Bitrate,
}

/// One scripted step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Join {
        node: NodeId,
    },
    Leave {
        node: NodeId,
    },
    Crash {
        node: NodeId,
    },
    StartConference,
    SendStream {
        /// Defaults to the root of the distribution tree.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source: Option<NodeId>,
        duration_ms: u64,
        #[serde(default = "default_packet_interval")]
        packet_interval_ms: u64,
        #[serde(default = "default_stream_tos")]
        tos: TosValue,
    },
    SetBandwidth {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        free: Option<Bitrate>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        application: Option<Bitrate>,
    },
    LogIn {
        node: NodeId,
        user: UserName,
        password: String,
    },
    JoinParticipant {
        node: NodeId,
        conference: String,
        key: KeyToken,
    },
    JoinSpectator {
        node: NodeId,
        conference: String,
    },
    LeaveConference {
        node: NodeId,
        conference: String,
    },
    Call {
        node: NodeId,
        callee: NodeId,
        key: KeyToken,
    },
    AcceptCall {
        node: NodeId,
        caller: NodeId,
        key: KeyToken,
    },
    EndCall {
        node: NodeId,
        conference: String,
    },
    Bye {
        node: NodeId,
    },
}

fn default_packet_interval() -> u64 {
    DEFAULT_PACKET_INTERVAL_MS
}

fn default_stream_tos() -> TosValue {
    TosValue::PRIORITY
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Join { .. } => "join",
            Action::Leave { .. } => "leave",
            Action::Crash { .. } => "crash",
            Action::StartConference => "start_conference",
            Action::SendStream { .. } => "send_stream",
            Action::SetBandwidth { .. } => "set_bandwidth",
            Action::LogIn { .. } => "log_in",
            Action::JoinParticipant { .. } => "join_participant",
            Action::JoinSpectator { .. } => "join_spectator",
            Action::LeaveConference { .. } => "leave_conference",
            Action::Call { .. } => "call",
            Action::AcceptCall { .. } => "accept_call",
            Action::EndCall { .. } => "end_call",
            Action::Bye { .. } => "bye",
        }
    }

    /// Nodes the action names.
    pub fn nodes(&self) -> Vec<NodeId> {
        match self {
            Action::Join { node }
            | Action::Leave { node }
            | Action::Crash { node }
            | Action::LogIn { node, .. }
            | Action::JoinParticipant { node, .. }
            | Action::JoinSpectator { node, .. }
            | Action::LeaveConference { node, .. }
            | Action::EndCall { node, .. }
            | Action::Bye { node } => vec![*node],
            Action::Call { node, callee, .. } => vec![*node, *callee],
            Action::AcceptCall { node, caller, .. } => vec![*node, *caller],
            Action::SendStream { source, .. } => source.iter().copied().collect(),
            Action::StartConference | Action::SetBandwidth { .. } => Vec::new(),
        }
    }

    /// The conference-server request this action sends, with its sender.
    pub fn control(&self) -> Option<(NodeId, ControlMessage)> {
        let m = match self {
            Action::LogIn { node, user, password } => (
                *node,
                ControlMessage::LogIn {
                    user: user.clone(),
                    password: password.clone(),
                },
            ),
            Action::JoinParticipant { node, conference, key } => (
                *node,
                ControlMessage::JoinConferenceP {
                    conference: conference.clone(),
                    key: key.clone(),
                },
            ),
            Action::JoinSpectator { node, conference } => (
                *node,
                ControlMessage::JoinConferenceS {
                    conference: conference.clone(),
                },
            ),
            Action::LeaveConference { node, conference } => (
                *node,
                ControlMessage::LeaveConference {
                    conference: conference.clone(),
                },
            ),
            Action::Call { node, callee, key } => (
                *node,
                ControlMessage::Call {
                    callee: *callee,
                    key: key.clone(),
                },
            ),
            Action::AcceptCall { node, caller, key } => (
                *node,
                ControlMessage::CallAccepted {
                    caller: *caller,
                    key: key.clone(),
                },
            ),
            Action::EndCall { node, conference } => (
                *node,
                ControlMessage::EndCall {
                    conference: conference.clone(),
                },
            ),
            Action::Bye { node } => (*node, ControlMessage::Bye),
            _ => return None,
        };
        Some(m)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimedAction {
    pub at_ms: u64,
    pub action: Action,
}

impl TryFrom<toml::Table> for TimedAction {
    type Error = String;

    fn try_from(mut table: toml::Table) -> Result<Self, String> {
        let at = table.remove("at_ms").ok_or("script entry needs `at_ms`")?;
        let at_ms = match at {
            toml::Value::Integer(t) if t >= 0 => t as u64,
            toml::Value::Integer(t) => return Err(format!("negative time {t}")),
            other => return Err(format!("`at_ms` must be an integer, got {}", other.type_str())),
        };
        let action = Action::deserialize(toml::Value::Table(table)).map_err(|e| e.message().to_string())?;
        Ok(TimedAction { at_ms, action })
    }
}

impl From<TimedAction> for toml::Table {
    fn from(entry: TimedAction) -> toml::Table {
        let mut table = toml::Table::new();
        table.insert("at_ms".into(), toml::Value::Integer(entry.at_ms as i64));
        let toml::Value::Table(rest) = toml::Value::try_from(&entry.action).expect("actions serialize") else {
            unreachable!("actions serialize as tables")
        };
        table.extend(rest);
        table
    }
}

impl Serialize for TimedAction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        toml::Table::from(self.clone()).serialize(s)
    }
}

impl<'de> Deserialize<'de> for TimedAction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let table = toml::Table::deserialize(d)?;
        TimedAction::try_from(table).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserAccount {
    pub name: UserName,
    pub password: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConferenceSpec {
    pub name: String,
    pub host: UserName,
    #[serde(default)]
    pub participants: BTreeSet<UserName>,
    #[serde(default)]
    pub spectators: BTreeSet<UserName>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConferenceSetup {
    pub users: Vec<UserAccount>,
    pub conferences: Vec<ConferenceSpec>,
}

impl ConferenceSetup {
    pub fn credentials(&self) -> BTreeMap<UserName, String> {
        self.users.iter().map(|u| (u.name.clone(), u.password.clone())).collect()
    }

    pub fn states(&self) -> Vec<ConferenceState> {
        self.conferences
            .iter()
            .map(|c| {
                ConferenceState::new(c.name.clone(), c.host.clone(), c.participants.clone(), c.spectators.clone())
                    .expect("validated conference name")
            })
            .collect()
    }
}

// Raw file layer. Spans point validation errors at lines.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    #[serde(default)]
    parameters: Parameters,
    bandwidth: Bandwidth,
    topology: TopologyFile,
    #[serde(default)]
    nodes: Vec<Spanned<NodeFile>>,
    /// TOS byte → delay multiplier.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    tos_delay: BTreeMap<String, f64>,
    #[serde(default)]
    conference: ConferenceSetup,
    #[serde(default)]
    script: Vec<Spanned<TimedAction>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyFile {
    #[serde(default)]
    routers: Vec<u32>,
    #[serde(default)]
    links: Vec<Spanned<LinkFile>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkFile {
    a: String,
    b: String,
    delay_ms: u64,
    capacity: Bitrate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeFile {
    id: u32,
    ram: String,
    cpu: String,
    #[serde(default = "one")]
    processors: u32,
    gateway: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    address: Option<String>,
    #[serde(default = "one")]
    hops_to_gateway: u32,
    /// Present from the start rather than joining by script.
    #[serde(default = "yes")]
    member: bool,
}

fn one() -> u32 {
    1
}

fn yes() -> bool {
    true
}

/// A validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub parameters: Parameters,
    pub bandwidth: Bandwidth,
    pub topology: UnderlayTopology,
    /// Sorted by node id.
    pub profiles: Vec<NodeProfile>,
    pub initial_members: BTreeSet<NodeId>,
    pub tos_delay: TosDelayProfile,
    pub conference: ConferenceSetup,
    /// Non-decreasing in time.
    pub script: Vec<TimedAction>,
}

fn line_of(source: &str, span: Range<usize>) -> Option<usize> {
    (span.start <= source.len() && !source.is_empty())
        .then(|| source[..span.start].bytes().filter(|&b| b == b'\n').count() + 1)
}

struct Collector<'a> {
    source: &'a str,
    diags: Vec<Diagnostic>,
}

impl Collector<'_> {
    fn at(&mut self, span: Option<Range<usize>>, message: impl Into<String>) {
        let line = span.and_then(|s| line_of(self.source, s));
        self.diags.push(Diagnostic {
            line,
            message: message.into(),
        });
    }
}

pub fn parse_scenario_str(source: &str) -> Result<Scenario, ScenarioError> {
    let file: ScenarioFile = toml::from_str(source).map_err(|e| ScenarioError::Syntax(e.to_string()))?;
    validate(file, source)
}

pub fn parse_scenario(path: &std::path::Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_scenario_str(&text)
}

fn validate(file: ScenarioFile, source: &str) -> Result<Scenario, ScenarioError> {
    let mut c = Collector {
        source,
        diags: Vec::new(),
    };
    if file.name.trim().is_empty() {
        c.at(None, "scenario name is empty");
    }

    let p = &file.parameters;
    if let Err(e) = ClusterBounds::new(p.k) {
        c.at(None, format!("parameters.k: {e}"));
    }
    if p.heartbeat_interval_ms == 0 {
        c.at(None, "parameters.heartbeat_interval_ms must be positive");
    }
    if p.timeout_multiplier == 0 {
        c.at(None, "parameters.timeout_multiplier must be positive");
    }
    if !(0.0..1.0).contains(&p.loss_rate) {
        c.at(None, format!("parameters.loss_rate {} is outside [0, 1)", p.loss_rate));
    }
    if p.event_budget == 0 {
        c.at(None, "parameters.event_budget must be positive");
    }

    let bw = file.bandwidth;
    check_bandwidth(&mut c, None, bw.network_capacity.0, bw.free.0, bw.application.0);

    let mut profiles = BTreeMap::new();
    let mut initial_members = BTreeSet::new();
    for spanned in &file.nodes {
        let span = Some(spanned.span());
        let n = spanned.get_ref();
        let node = NodeId(n.id);
        let ram = parse_bytes(&n.ram).map_err(|e| format!("node {}: ram: {e}", n.id));
        let cpu = parse_hertz(&n.cpu).map_err(|e| format!("node {}: cpu: {e}", n.id));
        let gateway = Address::new(n.gateway.clone()).map_err(|e| format!("node {}: gateway: {e}", n.id));
        let address = Address::new(n.address.clone().unwrap_or_else(|| format!("h{}", n.id)))
            .map_err(|e| format!("node {}: address: {e}", n.id));
        match (ram, cpu, gateway, address) {
            (Ok(free_ram), Ok(cpu_speed), Ok(gateway), Ok(local_address)) => {
                let profile = NodeProfile {
                    node,
                    free_ram,
                    cpu_speed,
                    processor_count: n.processors,
                    gateway,
                    local_address,
                    hop_distance: n.hops_to_gateway,
                };
                if let Err(e) = profile.validate() {
                    c.at(span.clone(), e.to_string());
                }
                if profiles.insert(node, profile).is_some() {
                    c.at(span, format!("node {} declared twice", n.id));
                } else if n.member {
                    initial_members.insert(node);
                }
            }
            (ram, cpu, gateway, address) => {
                for e in [ram.err(), cpu.err(), gateway.err(), address.err()].into_iter().flatten() {
                    c.at(span.clone(), e);
                }
            }
        }
    }

    let mut builder = TopologyBuilder::new();
    for &r in &file.topology.routers {
        builder.add_router(r);
    }
    for p in profiles.values() {
        builder.add_host(p.node, p.gateway.clone());
    }
    let mut links_ok = true;
    for spanned in &file.topology.links {
        let l = spanned.get_ref();
        let ends: Result<Vec<Endpoint>, String> = [&l.a, &l.b].iter().map(|s| s.parse()).collect();
        match ends {
            Ok(ends) => {
                for e in &ends {
                    if let Endpoint::Host(n) = e {
                        if !profiles.contains_key(n) {
                            c.at(Some(spanned.span()), format!("link names undeclared node {n}"));
                            links_ok = false;
                        }
                    }
                }
                builder.add_link(ends[0], ends[1], l.delay_ms, l.capacity.0);
            }
            Err(e) => {
                c.at(Some(spanned.span()), e);
                links_ok = false;
            }
        }
    }
    let topology = if links_ok {
        builder.build().map_err(|e| c.at(None, format!("topology: {e}"))).ok()
    } else {
        None
    };

    let mut tos_delay = TosDelayProfile::default();
    for (key, &m) in &file.tos_delay {
        match key.parse::<u8>().map_err(|e| e.to_string()).and_then(|b| TosValue::from_decimal(b).map_err(|e| e.to_string())) {
            Ok(tos) => tos_delay.set(tos, m),
            Err(e) => c.at(None, format!("tos_delay key `{key}`: {e}")),
        }
    }
    if let Err(e) = tos_delay.validate() {
        c.at(None, format!("tos_delay: {e}"));
    }

    let conf = &file.conference;
    let mut users = BTreeSet::new();
    for u in &conf.users {
        if !users.insert(u.name.clone()) {
            c.at(None, format!("user `{}` declared twice", u.name));
        }
    }
    let mut conference_names = BTreeSet::new();
    for spec in &conf.conferences {
        if let Err(e) = ConferenceState::new(spec.name.clone(), spec.host.clone(), BTreeSet::new(), BTreeSet::new()) {
            c.at(None, format!("conference: {e}"));
        }
        if !conference_names.insert(spec.name.clone()) {
            c.at(None, format!("conference `{}` declared twice", spec.name));
        }
        for user in std::iter::once(&spec.host).chain(&spec.participants).chain(&spec.spectators) {
            if !users.contains(user) {
                c.at(None, format!("conference `{}` names unknown user `{user}`", spec.name));
            }
        }
    }

    let mut last_time = 0;
    for spanned in &file.script {
        let span = Some(spanned.span());
        let entry = spanned.get_ref();
        if entry.at_ms < last_time {
            c.at(span.clone(), format!("script time {} goes back before {last_time}", entry.at_ms));
        }
        last_time = last_time.max(entry.at_ms);
        for node in entry.action.nodes() {
            if !profiles.contains_key(&node) {
                c.at(span.clone(), format!("{} names unknown node {node}", entry.action.name()));
            }
        }
        match &entry.action {
            Action::SendStream {
                packet_interval_ms,
                duration_ms,
                ..
            } => {
                if *packet_interval_ms == 0 {
                    c.at(span.clone(), "packet_interval_ms must be positive");
                }
                if *duration_ms == 0 {
                    c.at(span, "duration_ms must be positive");
                }
            }
            Action::SetBandwidth { free, application } => check_bandwidth(
                &mut c,
                span,
                bw.network_capacity.0,
                free.unwrap_or(bw.free).0,
                application.unwrap_or(bw.application).0,
            ),
            Action::LogIn { user, .. } if !users.contains(user) => {
                c.at(span, format!("log_in names unknown user `{user}`"));
            }
            _ => {}
        }
    }

    if !c.diags.is_empty() {
        return Err(ScenarioError::Invalid(c.diags));
    }
    Ok(Scenario {
        name: file.name,
        parameters: file.parameters,
        bandwidth: file.bandwidth,
        topology: topology.expect("no diagnostics means the topology built"),
        profiles: profiles.into_values().collect(),
        initial_members,
        tos_delay,
        conference: file.conference,
        script: file.script.into_iter().map(Spanned::into_inner).collect(),
    })
}

fn check_bandwidth(c: &mut Collector<'_>, span: Option<Range<usize>>, capacity: u64, free: u64, app: u64) {
    if capacity == 0 {
        c.at(span.clone(), "network capacity must be positive");
    }
    if free == 0 {
        c.at(span.clone(), "free bandwidth must be positive");
    }
    if free > capacity {
        c.at(span.clone(), "free bandwidth exceeds network capacity");
    }
    if let Err(e) = compute_fanout_threshold(free, app) {
        c.at(span, e.to_string());
    }
}

fn unspanned<T>(value: T) -> Spanned<T> {
    Spanned::new(0..0, value)
}

impl Scenario {
    pub fn node_count(&self) -> usize {
        self.profiles.len()
    }

    pub fn profile(&self, node: NodeId) -> Option<&NodeProfile> {
        self.profiles.binary_search_by_key(&node, |p| p.node).ok().map(|i| &self.profiles[i])
    }

    /// TOML text that parses back to this scenario.
    pub fn to_toml(&self) -> String {
        let nodes = self
            .profiles
            .iter()
            .map(|p| {
                unspanned(NodeFile {
                    id: p.node.0,
                    ram: format_bytes(p.free_ram),
                    cpu: format_hertz(p.cpu_speed),
                    processors: p.processor_count,
                    gateway: p.gateway.to_string(),
                    address: Some(p.local_address.to_string()),
                    hops_to_gateway: p.hop_distance,
                    member: self.initial_members.contains(&p.node),
                })
            })
            .collect();
        let links = self
            .topology
            .links()
            .iter()
            .map(|l| {
                unspanned(LinkFile {
                    a: l.a.to_string(),
                    b: l.b.to_string(),
                    delay_ms: l.delay_ms,
                    capacity: Bitrate(l.capacity_bps),
                })
            })
            .collect();
        let tos_delay = (0..8u8)
            .map(|bits| crate::underlay::encode_tos(bits).expect("three bits"))
            .filter(|&t| self.tos_delay.multiplier(t) != 1.0)
            .map(|t| (t.decimal().to_string(), self.tos_delay.multiplier(t)))
            .collect();
        let file = ScenarioFile {
            name: self.name.clone(),
            parameters: self.parameters.clone(),
            bandwidth: self.bandwidth,
            topology: TopologyFile {
                routers: self.topology.routers().map(|r| r.0).collect(),
                links,
            },
            nodes,
            tos_delay,
            conference: self.conference.clone(),
            script: self.script.iter().cloned().map(unspanned).collect(),
        };
        toml::to_string(&file).expect("scenarios serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::build_tree;
    use proptest::prelude::*;

    const MINIMAL: &str = r#"
name = "minimal"

[bandwidth]
network_capacity = "10Mbps"
free = "1Mbps"
application = "250kbps"

[topology]
routers = [0]
links = [
    { a = "n1", b = "r0", delay_ms = 2, capacity = "10Mbps" },
    { a = "n2", b = "r0", delay_ms = 3, capacity = "10Mbps" },
]

[[nodes]]
id = 1
ram = "1GB"
cpu = "1GHz"
gateway = "lan0"

[[nodes]]
id = 2
ram = "2GB"
cpu = "1GHz"
gateway = "lan0"
member = false

[[script]]
at_ms = 10
action = "join"
node = 2
"#;

    #[test]
    fn minimal_scenario_parses() {
        let s = parse_scenario_str(MINIMAL).unwrap();
        assert_eq!(s.profiles.len(), 2);
        assert_eq!(s.initial_members, BTreeSet::from([NodeId(1)]));
        assert_eq!(s.script, vec![TimedAction { at_ms: 10, action: Action::Join { node: NodeId(2) } }]);
        assert_eq!(s.parameters, Parameters::default());
        assert_eq!(s.topology.shortest_path_delay(NodeId(1), NodeId(2)), Ok(5));
        assert_eq!(s.profile(NodeId(2)).unwrap().free_ram, 2 << 30);
    }

    #[test]
    fn unknown_script_node_names_its_line() {
        let text = MINIMAL.replace("node = 2", "node = 9");
        let Err(ScenarioError::Invalid(diags)) = parse_scenario_str(&text) else {
            panic!("expected a validation error");
        };
        assert_eq!(diags.len(), 1);
        let expected_line = text.lines().position(|l| l.starts_with("[[script]]")).unwrap() + 1;
        assert_eq!(diags[0].line, Some(expected_line));
        assert!(diags[0].message.contains("unknown node 9"), "{}", diags[0].message);
    }

    #[test]
    fn zero_application_bandwidth_is_rejected() {
        let text = MINIMAL.replace("application = \"250kbps\"", "application = \"0bps\"");
        let err = parse_scenario_str(&text).unwrap_err();
        assert!(err.to_string().contains("application bandwidth"), "{err}");
    }

    #[test]
    fn free_below_application_is_rejected() {
        let text = MINIMAL.replace("free = \"1Mbps\"", "free = \"100kbps\"");
        assert!(matches!(parse_scenario_str(&text), Err(ScenarioError::Invalid(_))));
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_position() {
        let text = MINIMAL.replace("gateway = \"lan0\"\nmember", "gateway = \"lan0\"\ncolour = 1\nmember");
        let err = parse_scenario_str(&text).unwrap_err();
        let ScenarioError::Syntax(msg) = err else { panic!("expected a syntax error") };
        assert!(msg.contains("colour") && msg.contains("line"), "{msg}");

        let text = MINIMAL.replace("node = 2", "node = 2\nspeed = 3");
        let msg = parse_scenario_str(&text).unwrap_err().to_string();
        assert!(msg.contains("speed"), "{msg}");
    }

    #[test]
    fn negative_and_unsorted_times_are_rejected() {
        let text = MINIMAL.replace("at_ms = 10", "at_ms = -1");
        assert!(parse_scenario_str(&text).unwrap_err().to_string().contains("negative"));
        let text = format!("{MINIMAL}\n[[script]]\nat_ms = 5\naction = \"start_conference\"\n");
        assert!(parse_scenario_str(&text).unwrap_err().to_string().contains("goes back"));
    }

    #[test]
    fn dangling_link_endpoint() {
        let text = MINIMAL.replace("a = \"n2\"", "a = \"n7\"");
        let err = parse_scenario_str(&text).unwrap_err().to_string();
        assert!(err.contains("undeclared node 7"), "{err}");
    }

    #[test]
    fn worked_example_golden() {
        let s = golden("worked_example_s5").unwrap();
        assert_eq!(s.bandwidth.free, Bitrate(512_000));
        assert_eq!(s.bandwidth.application, Bitrate(250_000));
        let threshold = compute_fanout_threshold(s.bandwidth.free.0, s.bandwidth.application.0).unwrap();
        assert_eq!(threshold.p(), 2);
        let by_id: BTreeMap<u32, (u64, u64)> = s.profiles.iter().map(|p| (p.node.0, (p.free_ram, p.cpu_speed))).collect();
        assert_eq!(by_id[&1], (1 << 20, 512_000_000));
        assert_eq!(by_id[&2], (3 << 30, 2_000_000_000));
        assert_eq!(by_id[&3], (4 << 30, 2_370_000_000));
        assert_eq!(by_id[&4], (1 << 30, 1_200_000_000));
        let tree = build_tree(&s.profiles, &s.topology, &threshold).unwrap();
        assert_eq!(tree.root(), NodeId(3));
    }

    #[test]
    fn every_golden_round_trips() {
        for name in golden_names() {
            let s = golden(name).unwrap();
            let again = parse_scenario_str(&s.to_toml()).unwrap();
            assert_eq!(s, again, "{name}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn generated_scenarios_round_trip(seed in any::<u64>(), n in 2usize..24) {
            let s = random_scenario(&GeneratorConfig::new(n), seed);
            let text = s.to_toml();
            let again = parse_scenario_str(&text).unwrap();
            prop_assert_eq!(&s, &again);
            prop_assert_eq!(text, again.to_toml());
        }
    }
}
