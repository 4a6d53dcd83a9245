//! Stress and stretch of an overlay, and comparison tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::resources::NodeId;
use crate::tree::OverlayTree;
use crate::underlay::{DirectedLink, PathMetric, UnderlayError, UnderlayTopology};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("member {0} is not reachable from the source in the overlay")]
    Unreachable(NodeId),
    #[error("source {0} and member {1} are distinct but zero apart in the underlay")]
    ZeroLengthPath(NodeId, NodeId),
    #[error(transparent)]
    Underlay(#[from] UnderlayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    Netrawalm,
    Nice,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Netrawalm => "netrawalm",
            Protocol::Nice => "nice",
        })
    }
}

impl FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "netrawalm" => Ok(Protocol::Netrawalm),
            "nice" => Ok(Protocol::Nice),
            other => Err(format!("unknown protocol `{other}` (expected netrawalm or nice)")),
        }
    }
}

/// Everything that happened to one data packet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketTrace {
    pub source: NodeId,
    pub seq: u64,
    /// Every overlay copy sent, as (sender, receiver).
    pub hops: Vec<(NodeId, NodeId)>,
    /// Receiver → overlay node it first got the packet from.
    pub delivered: BTreeMap<NodeId, NodeId>,
    /// Members that should have received it.
    pub expected: BTreeSet<NodeId>,
}

impl PacketTrace {
    pub fn new(source: NodeId, seq: u64, expected: BTreeSet<NodeId>) -> Self {
        PacketTrace {
            source,
            seq,
            hops: Vec::new(),
            delivered: BTreeMap::new(),
            expected,
        }
    }

    /// Overlay nodes from the source to `member`, following first deliveries.
    pub fn overlay_path(&self, member: NodeId) -> Option<Vec<NodeId>> {
        let mut path = vec![member];
        let mut at = member;
        while at != self.source {
            at = *self.delivered.get(&at)?;
            if path.len() > self.delivered.len() + 1 {
                return None;
            }
            path.push(at);
        }
        path.reverse();
        Some(path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StressReport {
    /// Per directed link, the largest number of copies of one packet it carried.
    pub per_link: BTreeMap<DirectedLink, u32>,
    pub max: u32,
}

pub fn compute_stress(traces: &[PacketTrace], topology: &UnderlayTopology) -> Result<StressReport, MetricsError> {
    let mut report = StressReport::default();
    for trace in traces {
        let mut copies: BTreeMap<DirectedLink, u32> = BTreeMap::new();
        for &(from, to) in &trace.hops {
            for link in topology.shortest_path_links(from, to, PathMetric::Delay)? {
                *copies.entry(link).or_default() += 1;
            }
        }
        for (link, n) in copies {
            let slot = report.per_link.entry(link).or_default();
            *slot = (*slot).max(n);
            report.max = report.max.max(n);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StretchReport {
    pub per_member: BTreeMap<NodeId, f64>,
    /// Mean of `per_member`; absent when no member received anything.
    pub average: Option<f64>,
}

impl StretchReport {
    fn from_members(per_member: BTreeMap<NodeId, f64>) -> Self {
        let average = (!per_member.is_empty()).then(|| per_member.values().sum::<f64>() / per_member.len() as f64);
        StretchReport { per_member, average }
    }
}

fn overlay_length(path: &[NodeId], topology: &UnderlayTopology, metric: PathMetric) -> Result<u64, MetricsError> {
    path.windows(2).try_fold(0u64, |acc, w| Ok(acc + topology.path_cost(w[0], w[1], metric)?))
}

fn ratio(source: NodeId, member: NodeId, overlay: u64, direct: u64) -> Result<f64, MetricsError> {
    match (overlay, direct) {
        (0, 0) => Ok(1.0),
        (_, 0) => Err(MetricsError::ZeroLengthPath(source, member)),
        _ => Ok(overlay as f64 / direct as f64),
    }
}

/// Stretch of every tree member relative to `source`, along the tree path.
pub fn compute_stretch(
    tree: &OverlayTree,
    topology: &UnderlayTopology,
    source: NodeId,
    metric: PathMetric,
) -> Result<StretchReport, MetricsError> {
    if !tree.contains(source) {
        return Err(MetricsError::Unreachable(source));
    }
    let mut per_member = BTreeMap::new();
    for member in tree.members().filter(|&m| m != source) {
        let path = tree.tree_path(source, member).ok_or(MetricsError::Unreachable(member))?;
        let overlay = overlay_length(&path, topology, metric)?;
        let direct = topology.path_cost(source, member, metric)?;
        per_member.insert(member, ratio(source, member, overlay, direct)?);
    }
    Ok(StretchReport::from_members(per_member))
}

/// Stretch per receiver over all traced packets: total overlay length over
/// total direct length.
pub fn stretch_from_traces(
    traces: &[PacketTrace],
    topology: &UnderlayTopology,
    metric: PathMetric,
) -> Result<StretchReport, MetricsError> {
    let mut sums: BTreeMap<NodeId, (u64, u64)> = BTreeMap::new();
    for trace in traces {
        for &member in trace.delivered.keys() {
            let path = trace.overlay_path(member).ok_or(MetricsError::Unreachable(member))?;
            let overlay = overlay_length(&path, topology, metric)?;
            let direct = topology.path_cost(trace.source, member, metric)?;
            ratio(trace.source, member, overlay, direct)?;
            let entry = sums.entry(member).or_default();
            entry.0 += overlay;
            entry.1 += direct;
        }
    }
    let per_member = sums
        .into_iter()
        .map(|(m, (overlay, direct))| (m, if direct == 0 { 1.0 } else { overlay as f64 / direct as f64 }))
        .collect();
    Ok(StretchReport::from_members(per_member))
}

/// Fraction of expected deliveries that happened; absent when nothing was expected.
pub fn delivered_fraction(traces: &[PacketTrace]) -> Option<f64> {
    let expected: usize = traces.iter().map(|t| t.expected.len()).sum();
    let got: usize = traces
        .iter()
        .map(|t| t.delivered.keys().filter(|m| t.expected.contains(m)).count())
        .sum();
    (expected > 0).then(|| got as f64 / expected as f64)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub protocol: Protocol,
    pub node_count: usize,
    pub stress_per_link: BTreeMap<String, u32>,
    pub max_stress: u32,
    pub stretch_per_member: BTreeMap<NodeId, f64>,
    pub average_stretch: Option<f64>,
    pub delivered_fraction: Option<f64>,
    pub packets: usize,
}

impl MetricsReport {
    pub fn from_traces(
        scenario: &str,
        protocol: Protocol,
        node_count: usize,
        traces: &[PacketTrace],
        topology: &UnderlayTopology,
        metric: PathMetric,
    ) -> Result<Self, MetricsError> {
        let stress = compute_stress(traces, topology)?;
        let stretch = stretch_from_traces(traces, topology, metric)?;
        Ok(MetricsReport {
            scenario: scenario.to_string(),
            protocol,
            node_count,
            stress_per_link: stress
                .per_link
                .iter()
                .map(|(l, &n)| (format!("{}>{}", l.from, l.to), n))
                .collect(),
            max_stress: stress.max,
            stretch_per_member: stretch.per_member,
            average_stretch: stretch.average,
            delivered_fraction: delivered_fraction(traces),
            packets: traces.len(),
        })
    }

    pub fn row(&self) -> ComparisonRow {
        ComparisonRow {
            scenario: self.scenario.clone(),
            node_count: self.node_count,
            protocol: self.protocol,
            avg_stretch: self.average_stretch,
            max_stress: self.max_stress,
            delivered_fraction: self.delivered_fraction,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// One line of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub scenario: String,
    pub node_count: usize,
    pub protocol: Protocol,
    pub avg_stretch: Option<f64>,
    pub max_stress: u32,
    pub delivered_fraction: Option<f64>,
}

pub const CSV_HEADER: &str = "scenario,node_count,protocol,avg_stretch,max_stress,delivered_fraction";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl ComparisonRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.scenario,
            self.node_count,
            self.protocol,
            opt(self.avg_stretch),
            self.max_stress,
            opt(self.delivered_fraction)
        )
    }
}

/// Header plus rows, sorted by (node_count, scenario, protocol).
pub fn render_csv(rows: &[ComparisonRow]) -> String {
    let mut sorted: Vec<&ComparisonRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        (a.node_count, &a.scenario, a.protocol).cmp(&(b.node_count, &b.scenario, b.protocol))
    });
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in sorted {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}
