//! Per-node link shaping state: a fixed one-way delay and an optional rate cap.

use std::collections::BTreeMap;
use std::fmt;
use std::num::NonZeroU32;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rate {
    #[default]
    Unlimited,
    #[serde(untagged)]
    Kbit(NonZeroU32),
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rate::Unlimited => f.write_str("unlimited"),
            Rate::Kbit(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for Rate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "unlimited" {
            return Ok(Rate::Unlimited);
        }
        s.parse::<NonZeroU32>()
            .map(Rate::Kbit)
            .map_err(|_| format!("rate must be a positive kbit/s value or `unlimited`, got {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LinkConfig {
    pub delay_ms: u32,
    pub rate: Rate,
}

impl LinkConfig {
    pub fn new(delay_ms: u32, rate_kbit: Option<u32>) -> Self {
        Self {
            delay_ms,
            rate: rate_kbit
                .and_then(NonZeroU32::new)
                .map_or(Rate::Unlimited, Rate::Kbit),
        }
    }

    pub fn is_default(&self) -> bool {
        *self == Self::default()
    }

    /// Time to put `bytes` on the wire at the configured rate.
    pub fn serialization_us(&self, bytes: usize) -> u64 {
        match self.rate {
            Rate::Unlimited => 0,
            // kbit/s == bits per ms, so bits * 1000 / kbit gives µs.
            Rate::Kbit(k) => (bytes as u64 * 8 * 1_000).div_ceil(u64::from(k.get())),
        }
    }

    pub fn delay_us(&self) -> u64 {
        u64::from(self.delay_ms) * 1_000
    }
}

impl fmt::Display for LinkConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "delay={}ms rate={}", self.delay_ms, self.rate)
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum LinkError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

/// Link state for a fixed node set.
#[derive(Debug, Clone, Default)]
pub struct LinkTable {
    links: BTreeMap<NodeId, LinkConfig>,
}

impl LinkTable {
    pub fn new(nodes: impl IntoIterator<Item = NodeId>) -> Self {
        Self {
            links: nodes.into_iter().map(|n| (n, LinkConfig::default())).collect(),
        }
    }

    pub fn get(&self, node: NodeId) -> Result<LinkConfig, LinkError> {
        self.links
            .get(&node)
            .copied()
            .ok_or(LinkError::UnknownNode(node))
    }

    /// Replace the node's link state, returning what it was.
    pub fn apply(&mut self, node: NodeId, cfg: LinkConfig) -> Result<LinkConfig, LinkError> {
        let slot = self
            .links
            .get_mut(&node)
            .ok_or(LinkError::UnknownNode(node))?;
        Ok(std::mem::replace(slot, cfg))
    }

    /// Back to defaults, returning the removed config.
    pub fn reset(&mut self, node: NodeId) -> Result<LinkConfig, LinkError> {
        self.apply(node, LinkConfig::default())
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, LinkConfig)> + '_ {
        self.links.iter().map(|(n, c)| (*n, *c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> LinkTable {
        LinkTable::new((0..4).map(NodeId))
    }

    #[test]
    fn apply_then_read() {
        let mut t = table();
        let cfg = LinkConfig::new(20, Some(10_000));
        assert_eq!(t.apply(NodeId(1), cfg), Ok(LinkConfig::default()));
        assert_eq!(t.get(NodeId(1)), Ok(cfg));
    }

    #[test]
    fn second_apply_returns_first() {
        let mut t = table();
        let first = LinkConfig::new(5, None);
        let second = LinkConfig::new(50, Some(1));
        t.apply(NodeId(2), first).unwrap();
        assert_eq!(t.apply(NodeId(2), second), Ok(first));
        // replaced, not merged
        assert_eq!(t.get(NodeId(2)), Ok(second));
    }

    #[test]
    fn reset_behaviour() {
        let mut t = table();
        assert_eq!(t.reset(NodeId(0)), Ok(LinkConfig::default()));
        assert!(t.get(NodeId(0)).unwrap().is_default());
        let cfg = LinkConfig::new(20, Some(10_000));
        t.apply(NodeId(0), cfg).unwrap();
        assert_eq!(t.reset(NodeId(0)), Ok(cfg));
        assert!(t.get(NodeId(0)).unwrap().is_default());
    }

    #[test]
    fn unknown_node() {
        let mut t = table();
        assert_eq!(
            t.apply(NodeId(9), LinkConfig::default()),
            Err(LinkError::UnknownNode(NodeId(9)))
        );
        assert_eq!(t.reset(NodeId(9)), Err(LinkError::UnknownNode(NodeId(9))));
    }

    #[test]
    fn rate_parsing_and_timing() {
        assert_eq!("unlimited".parse::<Rate>(), Ok(Rate::Unlimited));
        assert!("0".parse::<Rate>().is_err());
        assert!("-3".parse::<Rate>().is_err());
        let cfg = LinkConfig::new(20, Some(10_000));
        // 30 bytes = 240 bits at 10 000 bit/ms -> 24 µs
        assert_eq!(cfg.serialization_us(30), 24);
        assert_eq!(cfg.delay_us(), 20_000);
        assert_eq!(LinkConfig::default().serialization_us(1_000_000), 0);
    }
}
