//! Seeded random scenarios for sweeps and property checks.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Action, Bandwidth, Bitrate, ConferenceSetup, Parameters, Scenario, TimedAction};
use crate::resources::{build_priority_queue, Address, NodeId, NodeProfile};
use crate::underlay::{Endpoint, RouterId, TopologyBuilder, TosDelayProfile};

const MHZ: u64 = 1_000_000;
const MB: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub nodes: usize,
    pub max_lans: usize,
    /// Fixed bandwidth section; `None` draws a fan-out between 2 and 4.
    pub bandwidth: Option<Bandwidth>,
    pub parameters: Parameters,
    pub stream_ms: u64,
    /// Crash one member other than the most capable one, mid-stream.
    pub crash: bool,
    /// Every host sits one equal-delay hop from a single router.
    pub symmetric: bool,
}

impl GeneratorConfig {
    pub fn new(nodes: usize) -> Self {
        GeneratorConfig {
            nodes,
            max_lans: 4,
            bandwidth: None,
            parameters: Parameters::default(),
            stream_ms: 120,
            crash: false,
            symmetric: false,
        }
    }
}

fn bandwidth_for_fanout(p: u64) -> Bandwidth {
    Bandwidth {
        network_capacity: Bitrate(10_000_000),
        free: Bitrate(p * 250_000),
        application: Bitrate(250_000),
    }
}

/// Builds a connected random underlay with `config.nodes` hosts spread over
/// up to `config.max_lans` LANs, all of them initial members, and a script
/// that starts the conference and streams from the tree root.
pub fn random_scenario(config: &GeneratorConfig, seed: u64) -> Scenario {
    assert!(config.nodes >= 1, "a scenario needs at least one node");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.nodes;
    let lans = rng.gen_range(1..=config.max_lans.clamp(1, n));
    let routers = if config.symmetric { 1 } else { (n / 4).clamp(1, 8) };

    let mut b = TopologyBuilder::new();
    for r in 0..routers as u32 {
        b.add_router(r);
    }
    let router = |r: usize| Endpoint::Router(RouterId(r as u32));
    let backbone = 1_000_000_000;
    let mut edges = BTreeSet::new();
    for r in 1..routers {
        let to = rng.gen_range(0..r);
        edges.insert((to, r));
        b.add_link(router(to), router(r), rng.gen_range(2..=20), backbone);
    }
    for _ in 0..routers / 2 {
        let (x, y) = (rng.gen_range(0..routers), rng.gen_range(0..routers));
        let (x, y) = (x.min(y), x.max(y));
        if x != y && edges.insert((x, y)) {
            b.add_link(router(x), router(y), rng.gen_range(2..=20), backbone);
        }
    }

    let lan_router: Vec<usize> = (0..lans).map(|_| rng.gen_range(0..routers)).collect();
    let mut profiles = Vec::with_capacity(n);
    for i in 0..n {
        let lan = if i < lans { i } else { rng.gen_range(0..lans) };
        let node = NodeId(i as u32);
        let gateway = Address::new(format!("lan{lan}")).expect("well-formed");
        let delay = if config.symmetric { 5 } else { rng.gen_range(1..=5) };
        b.add_host(node, gateway.clone());
        b.add_link(Endpoint::Host(node), router(lan_router[lan]), delay, 100_000_000);
        profiles.push(NodeProfile {
            node,
            free_ram: rng.gen_range(256..=8192) * MB,
            cpu_speed: rng.gen_range(512..=3000) * MHZ,
            processor_count: rng.gen_range(1..=4),
            gateway,
            local_address: Address::new(format!("h{i}")).expect("well-formed"),
            hop_distance: rng.gen_range(1..=3),
        });
    }
    let topology = b.build().expect("generated underlays are connected");

    let bandwidth = config
        .bandwidth
        .unwrap_or_else(|| bandwidth_for_fanout(rng.gen_range(2..=4)));

    let mut script = vec![
        TimedAction {
            at_ms: 0,
            action: Action::StartConference,
        },
        TimedAction {
            at_ms: 10,
            action: Action::SendStream {
                source: None,
                duration_ms: config.stream_ms,
                packet_interval_ms: super::DEFAULT_PACKET_INTERVAL_MS,
                tos: crate::underlay::TosValue::PRIORITY,
            },
        },
    ];
    if config.crash && n >= 2 {
        let root = build_priority_queue(&profiles).expect("non-empty")[0];
        let candidates: Vec<NodeId> = profiles.iter().map(|p| p.node).filter(|&m| m != root).collect();
        let victim = *candidates.choose(&mut rng).expect("at least one non-root");
        let interval = config.parameters.heartbeat_interval_ms;
        let at_ms = rng.gen_range(interval..=3 * interval);
        script.push(TimedAction {
            at_ms,
            action: Action::Crash { node: victim },
        });
    }

    let mut parameters = config.parameters.clone();
    parameters.seed = seed;
    Scenario {
        name: format!("random-n{n}-s{seed}"),
        parameters,
        bandwidth,
        initial_members: profiles.iter().map(|p| p.node).collect(),
        profiles,
        topology,
        tos_delay: TosDelayProfile::default(),
        conference: ConferenceSetup::default(),
        script,
    }
}

/// A random scenario with `template`'s parameters and bandwidth, named after
/// the template, the node count and the seed.
pub fn sweep_scenario(template: &Scenario, nodes: usize, seed: u64) -> Scenario {
    let mut config = GeneratorConfig::new(nodes);
    config.parameters = template.parameters.clone();
    config.bandwidth = Some(template.bandwidth);
    let mut s = random_scenario(&config, seed);
    s.name = format!("{}-n{nodes}-s{seed}", template.name);
    s.tos_delay = template.tos_delay.clone();
    s
}
