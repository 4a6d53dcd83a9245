//! Scenarios bundled with the library.

use super::{parse_scenario_str, Scenario};

pub const GOLDENS: &[(&str, &str)] = &[
    ("worked_example_s5", include_str!("../../scenarios/worked_example_s5.toml")),
    ("fig6_ring", include_str!("../../scenarios/fig6_ring.toml")),
    ("join_descent_s34", include_str!("../../scenarios/join_descent_s34.toml")),
    ("leader_failover_s35", include_str!("../../scenarios/leader_failover_s35.toml")),
];

pub fn golden_names() -> impl Iterator<Item = &'static str> {
    GOLDENS.iter().map(|&(name, _)| name)
}

/// Parses the bundled scenario called `name`, or `None` if there is none.
pub fn golden(name: &str) -> Option<Scenario> {
    golden_source(name).map(|text| parse_scenario_str(text).expect("bundled scenarios are valid"))
}

pub fn golden_source(name: &str) -> Option<&'static str> {
    GOLDENS.iter().find(|&&(n, _)| n == name).map(|&(_, text)| text)
}

