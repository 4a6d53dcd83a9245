//! TOS-aware route selection.

use serde::{Deserialize, Serialize};

use super::{Endpoint, RouterId, TosValue, UnderlayError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub destination: Endpoint,
    pub next_hop: RouterId,
    pub tos: TosValue,
    metric: u32,
}

impl Route {
    pub fn new(
        destination: Endpoint,
        next_hop: RouterId,
        tos: TosValue,
        metric: u32,
    ) -> Result<Self, UnderlayError> {
        if metric == 0 {
            return Err(UnderlayError::ZeroMetric);
        }
        Ok(Route {
            destination,
            next_hop,
            tos,
            metric,
        })
    }

    /// A route learned from a protocol without TOS support.
    pub fn without_tos(destination: Endpoint, next_hop: RouterId, metric: u32) -> Result<Self, UnderlayError> {
        Route::new(destination, next_hop, TosValue::ROUTINE, metric)
    }

    pub fn metric(&self) -> u32 {
        self.metric
    }
}

/// ICMP Destination Unreachable codes used when a TOS route lookup fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IcmpCode {
    NetworkUnreachableForTos,
    HostUnreachableForTos,
}

impl IcmpCode {
    pub fn code(self) -> u8 {
        match self {
            IcmpCode::NetworkUnreachableForTos => 11,
            IcmpCode::HostUnreachableForTos => 12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RouteDecision {
    Forward(RouterId),
    DropIcmp(IcmpCode),
}

pub fn select_route(table: &[Route], destination: Endpoint, packet_tos: TosValue) -> RouteDecision {
    let best = |tos: TosValue| {
        table
            .iter()
            .filter(|r| r.destination == destination && r.tos == tos)
            .min_by_key(|r| (r.metric, r.next_hop))
    };
    if let Some(route) = best(packet_tos).or_else(|| best(TosValue::ROUTINE)) {
        return RouteDecision::Forward(route.next_hop);
    }
    // Every remaining route to the destination, if any, carries some other TOS.
    if table.iter().any(|r| r.destination == destination) {
        RouteDecision::DropIcmp(IcmpCode::NetworkUnreachableForTos)
    } else {
        RouteDecision::DropIcmp(IcmpCode::HostUnreachableForTos)
    }
}
