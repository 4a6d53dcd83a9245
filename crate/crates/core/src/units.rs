//! Human-readable quantity parsing.
//!
//! RAM uses binary multiples (`1KB = 1024 B`), clock speeds and bandwidths
//! use decimal SI multiples (`1MHz = 10^6 Hz`, `1kbps = 10^3 bit/s`).
//! A bare number is taken in the base unit. Fractional mantissas are
//! accepted and rounded to the nearest base unit.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UnitError {
    #[error("empty quantity")]
    Empty,
    #[error("malformed number in `{0}`")]
    BadNumber(String),
    #[error("unknown unit suffix `{suffix}` in `{input}` (expected one of {expected})")]
    UnknownSuffix {
        input: String,
        suffix: String,
        expected: &'static str,
    },
    #[error("quantity `{0}` overflows")]
    Overflow(String),
}

const BYTE_UNITS: &[(&str, u64)] = &[
    ("", 1),
    ("B", 1),
    ("KB", 1 << 10),
    ("KIB", 1 << 10),
    ("MB", 1 << 20),
    ("MIB", 1 << 20),
    ("GB", 1 << 30),
    ("GIB", 1 << 30),
    ("TB", 1 << 40),
    ("TIB", 1 << 40),
];

const HERTZ_UNITS: &[(&str, u64)] = &[
    ("", 1),
    ("HZ", 1),
    ("KHZ", 1_000),
    ("MHZ", 1_000_000),
    ("GHZ", 1_000_000_000),
];

const BITRATE_UNITS: &[(&str, u64)] = &[
    ("", 1),
    ("BPS", 1),
    ("KBPS", 1_000),
    ("MBPS", 1_000_000),
    ("GBPS", 1_000_000_000),
];

/// Parses a RAM quantity such as `4GB` or `512MB` into bytes.
pub fn parse_bytes(input: &str) -> Result<u64, UnitError> {
    parse_with(input, BYTE_UNITS, "B, KB, MB, GB, TB")
}

/// Parses a clock speed such as `2.37GHz` into hertz.
pub fn parse_hertz(input: &str) -> Result<u64, UnitError> {
    parse_with(input, HERTZ_UNITS, "Hz, kHz, MHz, GHz")
}

/// Parses a bandwidth such as `512kbps` into bits per second.
pub fn parse_bitrate(input: &str) -> Result<u64, UnitError> {
    parse_with(input, BITRATE_UNITS, "bps, kbps, Mbps, Gbps")
}

pub fn format_bytes(value: u64) -> String {
    format_with(value, &[("TB", 1 << 40), ("GB", 1 << 30), ("MB", 1 << 20), ("KB", 1 << 10)], "B")
}

pub fn format_hertz(value: u64) -> String {
    format_with(
        value,
        &[("GHz", 1_000_000_000), ("MHz", 1_000_000), ("kHz", 1_000)],
        "Hz",
    )
}

pub fn format_bitrate(value: u64) -> String {
    format_with(
        value,
        &[("Gbps", 1_000_000_000), ("Mbps", 1_000_000), ("kbps", 1_000)],
        "bps",
    )
}

// Largest suffix that represents the value exactly, so formatting never loses precision.
fn format_with(value: u64, units: &[(&str, u64)], base: &str) -> String {
    for (suffix, scale) in units {
        if value != 0 && value.is_multiple_of(*scale) {
            return format!("{}{}", value / scale, suffix);
        }
    }
    format!("{value}{base}")
}

fn parse_with(input: &str, units: &[(&str, u64)], expected: &'static str) -> Result<u64, UnitError> {
    let trimmed = input.trim();
    if trimmed.is_empty() {
        return Err(UnitError::Empty);
    }
    let split = trimmed
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(trimmed.len());
    let (number, suffix) = trimmed.split_at(split);
    let suffix_upper = suffix.trim().to_ascii_uppercase();
    let scale = units
        .iter()
        .find(|(name, _)| *name == suffix_upper)
        .map(|(_, scale)| *scale)
        .ok_or_else(|| UnitError::UnknownSuffix {
            input: input.to_string(),
            suffix: suffix.trim().to_string(),
            expected,
        })?;
    scale_decimal(number, scale).ok_or_else(|| {
        if number.is_empty() || number.matches('.').count() > 1 || number == "." {
            UnitError::BadNumber(input.to_string())
        } else {
            UnitError::Overflow(input.to_string())
        }
    })
}

fn scale_decimal(number: &str, scale: u64) -> Option<u64> {
    let (int_part, frac_part) = match number.split_once('.') {
        Some((i, f)) => (i, f),
        None => (number, ""),
    };
    if (int_part.is_empty() && frac_part.is_empty()) || frac_part.contains('.') {
        return None;
    }
    if frac_part.len() > 18 {
        return None;
    }
    let digits = format!("{int_part}{frac_part}");
    let mantissa: u128 = digits.parse().ok()?;
    let denominator = 10u128.pow(frac_part.len() as u32);
    let scaled = mantissa.checked_mul(scale as u128)?;
    let rounded = (scaled + denominator / 2) / denominator;
    u64::try_from(rounded).ok()
}
