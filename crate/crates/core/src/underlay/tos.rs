//! IPv4 Type-of-Service precedence encoding.
//!
//! Only the three precedence bits are modeled. The encoded byte is the
//! precedence shifted into the top three bits, i.e. `precedence * 32`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::UnderlayError;

const DESCRIPTIONS: [&str; 8] = [
    "Routine",
    "Priority",
    "Immediate",
    "Flash",
    "Flash Override",
    "CRITIC/ECP",
    "Internetwork Control",
    "Network Control",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct TosValue {
    precedence: u8,
}

impl TosValue {
    pub const ROUTINE: TosValue = TosValue { precedence: 0 };
    /// Precedence used for conference media streams.
    pub const PRIORITY: TosValue = TosValue { precedence: 1 };

    pub fn precedence_bits(self) -> u8 {
        self.precedence
    }

    /// The TOS byte as written in the IP header.
    pub fn decimal(self) -> u8 {
        self.precedence << 5
    }

    pub fn description(self) -> &'static str {
        DESCRIPTIONS[self.precedence as usize]
    }

    /// Inverse of [`TosValue::decimal`]; rejects bytes with bits outside the precedence field.
    pub fn from_decimal(byte: u8) -> Result<Self, UnderlayError> {
        if byte & 0x1f != 0 {
            return Err(UnderlayError::TosNotPrecedence(byte));
        }
        encode_tos(byte >> 5)
    }
}

impl fmt::Display for TosValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:03b}/{}", self.precedence, self.decimal())
    }
}

impl TryFrom<u8> for TosValue {
    type Error = UnderlayError;

    fn try_from(byte: u8) -> Result<Self, Self::Error> {
        TosValue::from_decimal(byte)
    }
}

impl From<TosValue> for u8 {
    fn from(tos: TosValue) -> u8 {
        tos.decimal()
    }
}

pub fn encode_tos(precedence_bits: u8) -> Result<TosValue, UnderlayError> {
    if precedence_bits > 7 {
        return Err(UnderlayError::PrecedenceOutOfRange(precedence_bits));
    }
    Ok(TosValue {
        precedence: precedence_bits,
    })
}

/// Optional per-precedence scaling of link delay. Empty means every class
/// sees the plain link delay.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TosDelayProfile {
    multipliers: BTreeMap<u8, f64>,
}

impl TosDelayProfile {
    pub fn set(&mut self, tos: TosValue, multiplier: f64) {
        self.multipliers.insert(tos.decimal(), multiplier);
    }

    pub fn multiplier(&self, tos: TosValue) -> f64 {
        self.multipliers.get(&tos.decimal()).copied().unwrap_or(1.0)
    }

    pub fn apply(&self, delay_ms: u64, tos: TosValue) -> u64 {
        let m = self.multiplier(tos);
        if m == 1.0 {
            delay_ms
        } else {
            (delay_ms as f64 * m).round().max(0.0) as u64
        }
    }

    pub fn is_empty(&self) -> bool {
        self.multipliers.is_empty()
    }

    pub fn validate(&self) -> Result<(), UnderlayError> {
        for (&byte, &m) in &self.multipliers {
            TosValue::from_decimal(byte)?;
            if !(m.is_finite() && m > 0.0) {
                return Err(UnderlayError::BadDelayMultiplier(byte, m));
            }
        }
        Ok(())
    }
}
