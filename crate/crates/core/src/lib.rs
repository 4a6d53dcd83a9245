//! Resource-aware application-layer multicast for multiparty conferencing.

pub mod baseline;
pub mod conference;
pub mod membership;
pub mod metrics;
pub mod resources;
pub mod scenario;
pub mod sim;
pub mod tree;
pub mod underlay;
pub mod units;
