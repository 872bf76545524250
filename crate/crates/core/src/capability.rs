//! Capabilities: unforgeable keyed references to one allocation on one depot.
//!
//! The canonical text form is `ebp://<host>:<port>/<alloc_id>/<key>/<kind>`
//! where `key` is 40 lowercase hex characters (160 bits).

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Length of a capability key in bytes.
pub const KEY_LEN: usize = 20;

const SCHEME: &str = "ebp://";

/// Access kind granted by a capability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CapKind {
    Read,
    Write,
    Manage,
}

impl CapKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CapKind::Read => "read",
            CapKind::Write => "write",
            CapKind::Manage => "manage",
        }
    }

    pub(crate) fn index(self) -> usize {
        match self {
            CapKind::Read => 0,
            CapKind::Write => 1,
            CapKind::Manage => 2,
        }
    }
}

impl fmt::Display for CapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CapKind {
    type Err = CapParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "read" => Ok(CapKind::Read),
            "write" => Ok(CapKind::Write),
            "manage" => Ok(CapKind::Manage),
            other => Err(CapParseError(format!("unknown capability kind {other:?}"))),
        }
    }
}

/// A 160-bit random capability key.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct CapKey([u8; KEY_LEN]);

impl CapKey {
    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        CapKey(bytes)
    }

    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; KEY_LEN];
        rng.fill_bytes(&mut bytes);
        CapKey(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }

    /// Returns a copy with bit `bit` (0..160) inverted.
    pub fn with_bit_flipped(&self, bit: usize) -> Self {
        let mut bytes = self.0;
        bytes[bit / 8] ^= 1 << (bit % 8);
        CapKey(bytes)
    }

    /// Comparison whose running time does not depend on where the keys differ.
    pub fn ct_eq(&self, other: &CapKey) -> bool {
        self.0
            .iter()
            .zip(other.0.iter())
            .fold(0u8, |acc, (a, b)| acc | (a ^ b))
            == 0
    }
}

impl fmt::Debug for CapKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CapKey({}..)", &hex::encode(self.0)[..8])
    }
}

impl fmt::Display for CapKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl FromStr for CapKey {
    type Err = CapParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != KEY_LEN * 2 || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(CapParseError(format!(
                "key must be {} lowercase hex characters",
                KEY_LEN * 2
            )));
        }
        let mut bytes = [0u8; KEY_LEN];
        hex::decode_to_slice(s, &mut bytes).map_err(|e| CapParseError(e.to_string()))?;
        Ok(CapKey(bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid capability: {0}")]
pub struct CapParseError(pub String);

/// Keyed reference to one allocation on one depot.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Capability {
    pub depot_addr: String,
    pub alloc_id: u64,
    pub kind: CapKind,
    pub key: CapKey,
}

impl Capability {
    pub fn new(depot_addr: impl Into<String>, alloc_id: u64, kind: CapKind, key: CapKey) -> Self {
        Capability {
            depot_addr: depot_addr.into(),
            alloc_id,
            kind,
            key,
        }
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{SCHEME}{}/{}/{}/{}",
            self.depot_addr, self.alloc_id, self.key, self.kind
        )
    }
}

/// Validates a `host:port` depot address. The host may not contain `/`,
/// whitespace, or be empty; the port must be a canonical decimal u16.
pub fn validate_depot_addr(addr: &str) -> Result<(), CapParseError> {
    let (host, port) = addr
        .rsplit_once(':')
        .ok_or_else(|| CapParseError(format!("depot address {addr:?} lacks a port")))?;
    if host.is_empty()
        || host
            .bytes()
            .any(|b| b == b'/' || b.is_ascii_whitespace() || b.is_ascii_control())
    {
        return Err(CapParseError(format!("bad host in {addr:?}")));
    }
    parse_canonical_u64(port)
        .filter(|p| *p <= u64::from(u16::MAX))
        .ok_or_else(|| CapParseError(format!("bad port in {addr:?}")))?;
    Ok(())
}

pub(crate) fn parse_canonical_u64(s: &str) -> Option<u64> {
    if s.is_empty() || (s.len() > 1 && s.starts_with('0')) || !s.bytes().all(|b| b.is_ascii_digit())
    {
        return None;
    }
    s.parse().ok()
}

impl FromStr for Capability {
    type Err = CapParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let rest = s
            .strip_prefix(SCHEME)
            .ok_or_else(|| CapParseError(format!("missing {SCHEME} prefix")))?;
        let parts: Vec<&str> = rest.split('/').collect();
        let [addr, id, key, kind] = parts.as_slice() else {
            return Err(CapParseError("expected addr/id/key/kind".into()));
        };
        validate_depot_addr(addr)?;
        let alloc_id =
            parse_canonical_u64(id).ok_or_else(|| CapParseError(format!("bad alloc id {id:?}")))?;
        Ok(Capability {
            depot_addr: (*addr).to_string(),
            alloc_id,
            key: key.parse()?,
            kind: kind.parse()?,
        })
    }
}

impl Serialize for Capability {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Capability {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The three capabilities issued for a new allocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapSet {
    pub read: Capability,
    pub write: Capability,
    pub manage: Capability,
}
