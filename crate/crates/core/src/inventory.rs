//! INI-style host inventories.
//!
//! ```text
//! # comment
//! [odroids-testgroup]
//! 192.168.1.[1:16] ansible_ssh_pass=odroid
//!
//! [odroids-control]
//! 192.168.[1:8].42 ansible_ssh_pass=odroid
//! ```
//!
//! A host line is a pattern followed by optional `key=value` variables that
//! apply to every address the pattern expands to. Patterns may hold any number
//! of `[lo:hi]` ranges; expansion is a cartesian product with the leftmost
//! range varying slowest.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::net::Ipv4Addr;
use std::path::Path;

use indexmap::IndexMap;
use serde::Serialize;
use thiserror::Error;

/// Variable name the inventory format uses for the SSH password.
const SSH_PASS_SOURCE_KEY: &str = "ansible_ssh_pass";
/// Tool-neutral name it is stored under.
pub const SSH_PASS_VAR: &str = "ssh_pass";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InventoryError {
    #[error("line {line}: group header is missing its closing `]`")]
    UnterminatedGroupHeader { line: usize },
    #[error("line {line}: group name is empty")]
    EmptyGroupName { line: usize },
    #[error("line {line}: host line appears before any `[group]` header")]
    HostLineBeforeAnyGroup { line: usize },
    #[error("line {line}: malformed range in {pattern:?}: {reason}")]
    MalformedRange {
        line: usize,
        pattern: String,
        reason: String,
    },
    #[error("line {line}: group `{name}` is defined twice")]
    DuplicateGroupName { line: usize, name: String },
    #[error("line {line}: malformed variable assignment {text:?}")]
    MalformedVarAssignment { line: usize, text: String },
    #[error("line {line}: {address:?} is not a dotted-quad IPv4 address")]
    InvalidAddress { line: usize, address: String },
    #[error("line {line}: host {address} appears twice in group `{group}`")]
    DuplicateHost {
        line: usize,
        group: String,
        address: String,
    },
    #[error("unknown group `{0}`")]
    UnknownGroup(String),
    #[error("cannot read inventory {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HostEntry {
    pub address: String,
    pub vars: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HostGroup {
    pub name: String,
    pub hosts: Vec<HostEntry>,
}

impl HostGroup {
    pub fn addresses(&self) -> impl Iterator<Item = &str> {
        self.hosts.iter().map(|h| h.address.as_str())
    }

    pub fn len(&self) -> usize {
        self.hosts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hosts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Inventory {
    pub groups: IndexMap<String, HostGroup>,
    pub source_path: Option<String>,
}

impl Inventory {
    pub fn resolve_group(&self, name: &str) -> Result<&HostGroup, InventoryError> {
        resolve_group(self, name)
    }

    /// Render back to the textual format. Re-parsing the output yields an
    /// equal inventory (modulo `source_path`).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, group) in self.groups.values().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{}]", group.name);
            for host in &group.hosts {
                out.push_str(&host.address);
                for (k, v) in &host.vars {
                    let key = if k == SSH_PASS_VAR {
                        SSH_PASS_SOURCE_KEY
                    } else {
                        k
                    };
                    let _ = write!(out, " {key}={v}");
                }
                out.push('\n');
            }
        }
        out
    }
}

/// One piece of a host pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Range { lo: u32, hi: u32 },
}

/// A host pattern such as `192.168.[1:8].42`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostPattern {
    pub raw: String,
    segments: Vec<Segment>,
}

impl HostPattern {
    /// Split `raw` into literal and range segments, validating every range.
    /// The `Err` carries a human-readable reason.
    pub fn parse(raw: &str) -> Result<Self, String> {
        let mut segments = Vec::new();
        let mut rest = raw;
        while let Some(open) = rest.find('[') {
            if open > 0 {
                segments.push(Segment::Literal(rest[..open].to_string()));
            }
            let after = &rest[open + 1..];
            let close = after
                .find(']')
                .ok_or_else(|| "missing closing `]`".to_string())?;
            let body = &after[..close];
            let (lo, hi) = body
                .split_once(':')
                .ok_or_else(|| format!("range [{body}] has no `:`"))?;
            let lo = parse_bound(lo)?;
            let hi = parse_bound(hi)?;
            if lo > hi {
                return Err(format!("lower bound {lo} exceeds upper bound {hi}"));
            }
            segments.push(Segment::Range { lo, hi });
            rest = &after[close + 1..];
        }
        if rest.contains(']') {
            return Err("stray `]`".to_string());
        }
        if !rest.is_empty() {
            segments.push(Segment::Literal(rest.to_string()));
        }
        Ok(Self {
            raw: raw.to_string(),
            segments,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Product of the range widths; 1 for a pattern without ranges.
    pub fn expansion_count(&self) -> u64 {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Literal(_) => 1,
                Segment::Range { lo, hi } => u64::from(hi - lo) + 1,
            })
            .product()
    }
}

fn parse_bound(text: &str) -> Result<u32, String> {
    if text.is_empty() || !text.bytes().all(|b| b.is_ascii_digit()) {
        return Err(format!("bound {text:?} is not a non-negative integer"));
    }
    if text.len() > 1 && text.starts_with('0') {
        return Err(format!("bound {text:?} has a leading zero"));
    }
    text.parse()
        .map_err(|_| format!("bound {text:?} is out of range"))
}

/// Expand a pattern, leftmost range varying slowest.
pub fn expand_pattern(pattern: &HostPattern) -> Vec<String> {
    let mut out = vec![String::new()];
    for seg in &pattern.segments {
        match seg {
            Segment::Literal(lit) => out.iter_mut().for_each(|s| s.push_str(lit)),
            Segment::Range { lo, hi } => {
                out = out
                    .iter()
                    .flat_map(|prefix| (*lo..=*hi).map(move |v| format!("{prefix}{v}")))
                    .collect();
            }
        }
    }
    out
}

/// Parse and expand a raw pattern string in one step.
pub fn expand(raw: &str) -> Result<Vec<String>, InventoryError> {
    let pattern = HostPattern::parse(raw).map_err(|reason| InventoryError::MalformedRange {
        line: 0,
        pattern: raw.to_string(),
        reason,
    })?;
    Ok(expand_pattern(&pattern))
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

pub fn parse_inventory(source: &str) -> Result<Inventory, InventoryError> {
    let mut inv = Inventory::default();
    let mut current: Option<String> = None;
    // Per-group address sets for the duplicate check.
    let mut seen: HashSet<(String, String)> = HashSet::new();

    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let text = raw.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }

        if let Some(header) = text.strip_prefix('[') {
            // `192.168.[1:8].42` also starts with a digit, never with `[`,
            // so a leading bracket always means a header.
            let name = header
                .strip_suffix(']')
                .ok_or(InventoryError::UnterminatedGroupHeader { line })?
                .trim();
            if name.is_empty() {
                return Err(InventoryError::EmptyGroupName { line });
            }
            if inv.groups.contains_key(name) {
                return Err(InventoryError::DuplicateGroupName {
                    line,
                    name: name.to_string(),
                });
            }
            inv.groups.insert(
                name.to_string(),
                HostGroup {
                    name: name.to_string(),
                    hosts: Vec::new(),
                },
            );
            current = Some(name.to_string());
            continue;
        }

        let group_name = current
            .clone()
            .ok_or(InventoryError::HostLineBeforeAnyGroup { line })?;

        let mut tokens = text.split_whitespace();
        let raw_pattern = tokens.next().unwrap_or_default();
        let mut vars = BTreeMap::new();
        for token in tokens {
            let (key, value) = token
                .split_once('=')
                .filter(|(k, _)| is_identifier(k))
                .ok_or_else(|| InventoryError::MalformedVarAssignment {
                    line,
                    text: token.to_string(),
                })?;
            let key = if key == SSH_PASS_SOURCE_KEY {
                SSH_PASS_VAR
            } else {
                key
            };
            vars.insert(key.to_string(), value.to_string());
        }

        let pattern =
            HostPattern::parse(raw_pattern).map_err(|reason| InventoryError::MalformedRange {
                line,
                pattern: raw_pattern.to_string(),
                reason,
            })?;
        let group = inv
            .groups
            .get_mut(&group_name)
            .expect("current group was inserted");
        for address in expand_pattern(&pattern) {
            if address.parse::<Ipv4Addr>().is_err() {
                return Err(InventoryError::InvalidAddress { line, address });
            }
            if !seen.insert((group_name.clone(), address.clone())) {
                return Err(InventoryError::DuplicateHost {
                    line,
                    group: group_name.clone(),
                    address,
                });
            }
            group.hosts.push(HostEntry {
                address,
                vars: vars.clone(),
            });
        }
    }
    Ok(inv)
}

pub fn load_inventory(path: impl AsRef<Path>) -> Result<Inventory, InventoryError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| InventoryError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut inv = parse_inventory(&text)?;
    inv.source_path = Some(path.display().to_string());
    Ok(inv)
}

pub fn resolve_group<'a>(inv: &'a Inventory, name: &str) -> Result<&'a HostGroup, InventoryError> {
    inv.groups
        .get(name)
        .ok_or_else(|| InventoryError::UnknownGroup(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const REFERENCE_INVENTORY: &str = "# testbed hosts

[odroids-testgroup]
192.168.1.[1:16] ansible_ssh_pass=odroid

[odroids-testgroup-consumer]
192.168.1.1 ansible_ssh_pass=odroid

[odroids-control]
192.168.[1:8].42 ansible_ssh_pass=odroid
";

    #[test]
    fn testgroup_expands_to_sixteen_hosts_with_password() {
        let inv = parse_inventory("[odroids-testgroup]\n192.168.1.[1:16] ansible_ssh_pass=odroid")
            .unwrap();
        let group = inv.resolve_group("odroids-testgroup").unwrap();
        assert_eq!(group.len(), 16);
        assert_eq!(group.hosts[0].address, "192.168.1.1");
        assert_eq!(group.hosts[15].address, "192.168.1.16");
        for h in &group.hosts {
            assert_eq!(h.vars.get("ssh_pass").map(String::as_str), Some("odroid"));
            assert_eq!(h.vars.len(), 1);
        }
    }

    #[test]
    fn control_group_varies_third_octet() {
        let inv = parse_inventory("[odroids-control]\n192.168.[1:8].42 ansible_ssh_pass=odroid")
            .unwrap();
        let addrs: Vec<_> = inv.groups["odroids-control"].addresses().collect();
        let expected: Vec<String> = (1..=8).map(|r| format!("192.168.{r}.42")).collect();
        assert_eq!(addrs, expected);
    }

    #[test]
    fn degenerate_and_nested_ranges() {
        let inv = parse_inventory("[g]\n10.0.0.[5:5]").unwrap();
        assert_eq!(
            inv.groups["g"].addresses().collect::<Vec<_>>(),
            vec!["10.0.0.5"]
        );

        let inv = parse_inventory("[g]\n10.0.[1:3].[1:2]").unwrap();
        assert_eq!(
            inv.groups["g"].addresses().collect::<Vec<_>>(),
            vec!["10.0.1.1", "10.0.1.2", "10.0.2.1", "10.0.2.2", "10.0.3.1", "10.0.3.2"]
        );
    }

    #[test]
    fn expand_pattern_examples() {
        assert_eq!(expand("192.168.1.7").unwrap(), vec!["192.168.1.7"]);
        assert_eq!(
            expand("192.168.1.[1:3]").unwrap(),
            vec!["192.168.1.1", "192.168.1.2", "192.168.1.3"]
        );
        let four = expand("192.168.[2:3].[1:2]").unwrap();
        assert_eq!(four.len(), 4);
        assert_eq!(four[0], "192.168.2.1");
        assert_eq!(four[3], "192.168.3.2");
    }

    #[test]
    fn reference_listing_and_group_lookup() {
        let inv = parse_inventory(REFERENCE_INVENTORY).unwrap();
        let names: Vec<_> = inv.groups.keys().cloned().collect();
        assert_eq!(
            names,
            ["odroids-testgroup", "odroids-testgroup-consumer", "odroids-control"]
        );
        assert_eq!(resolve_group(&inv, "odroids-control").unwrap().len(), 8);
        assert_eq!(
            resolve_group(&inv, "missing"),
            Err(InventoryError::UnknownGroup("missing".into()))
        );
        // Overlapping membership produces independent entries.
        let consumer = &inv.groups["odroids-testgroup-consumer"].hosts[0];
        assert_eq!(consumer, &inv.groups["odroids-testgroup"].hosts[0]);
    }

    #[test]
    fn empty_group_resolves() {
        let inv = parse_inventory("[empty]\n").unwrap();
        assert!(resolve_group(&inv, "empty").unwrap().is_empty());
    }

    #[test]
    fn other_vars_are_kept_verbatim_and_whitespace_is_flexible() {
        let inv =
            parse_inventory("[g]  \n\t10.0.0.1 \t ansible_user=root  role=sink   \n").unwrap();
        let vars = &inv.groups["g"].hosts[0].vars;
        assert_eq!(vars["ansible_user"], "root");
        assert_eq!(vars["role"], "sink");
    }

    #[test]
    fn error_cases() {
        assert_eq!(
            parse_inventory("[g\n1.2.3.4"),
            Err(InventoryError::UnterminatedGroupHeader { line: 1 })
        );
        assert_eq!(
            parse_inventory("# c\n1.2.3.4"),
            Err(InventoryError::HostLineBeforeAnyGroup { line: 2 })
        );
        assert!(matches!(
            parse_inventory("[g]\n1.2.3.[5:1]"),
            Err(InventoryError::MalformedRange { line: 2, .. })
        ));
        assert!(matches!(
            parse_inventory("[g]\n1.2.3.[a:3]"),
            Err(InventoryError::MalformedRange { .. })
        ));
        assert!(matches!(
            parse_inventory("[g]\n1.2.3.[01:3]"),
            Err(InventoryError::MalformedRange { .. })
        ));
        assert!(matches!(
            parse_inventory("[g]\n1.2.3.[1:3"),
            Err(InventoryError::MalformedRange { .. })
        ));
        assert_eq!(
            parse_inventory("[g]\n[g]"),
            Err(InventoryError::DuplicateGroupName {
                line: 2,
                name: "g".into()
            })
        );
        assert!(matches!(
            parse_inventory("[g]\n1.2.3.4 novalue"),
            Err(InventoryError::MalformedVarAssignment { line: 2, .. })
        ));
        assert!(matches!(
            parse_inventory("[g]\n1.2.3.4 =x"),
            Err(InventoryError::MalformedVarAssignment { .. })
        ));
        assert!(matches!(
            parse_inventory("[g]\n1.2.3.[250:256]"),
            Err(InventoryError::InvalidAddress { .. })
        ));
        assert!(matches!(
            parse_inventory("[g]\nnode1"),
            Err(InventoryError::InvalidAddress { .. })
        ));
        assert!(matches!(
            parse_inventory("[g]\n1.2.3.[1:2]\n1.2.3.2"),
            Err(InventoryError::DuplicateHost { line: 3, .. })
        ));
        assert_eq!(
            parse_inventory("[ ]"),
            Err(InventoryError::EmptyGroupName { line: 1 })
        );
    }

    #[test]
    fn parsing_is_pure() {
        assert_eq!(
            parse_inventory(REFERENCE_INVENTORY).unwrap(),
            parse_inventory(REFERENCE_INVENTORY).unwrap()
        );
    }
}
