use std::collections::BTreeMap;

use indexmap::IndexMap;
use netpg_core::inventory::{
    expand, expand_pattern, parse_inventory, HostEntry, HostGroup, HostPattern, Inventory,
};
use proptest::prelude::*;

/// Octet-wise pattern: each octet is a literal or a `[lo:hi]` range.
#[derive(Debug, Clone)]
enum Octet {
    Lit(u32),
    Range(u32, u32),
}

impl Octet {
    fn text(&self) -> String {
        match self {
            Octet::Lit(v) => v.to_string(),
            Octet::Range(lo, hi) => format!("[{lo}:{hi}]"),
        }
    }

    fn values(&self) -> Vec<u32> {
        match self {
            Octet::Lit(v) => vec![*v],
            Octet::Range(lo, hi) => (*lo..=*hi).collect(),
        }
    }
}

fn octet(ranged: bool) -> BoxedStrategy<Octet> {
    if ranged {
        (0u32..=245, 0u32..10).prop_map(|(lo, w)| Octet::Range(lo, lo + w)).boxed()
    } else {
        (0u32..=255).prop_map(Octet::Lit).boxed()
    }
}

fn pattern() -> impl Strategy<Value = Vec<Octet>> {
    prop::collection::vec(any::<bool>(), 4)
        .prop_filter("at most three ranges", |m| m.iter().filter(|r| **r).count() <= 3)
        .prop_flat_map(|mask| mask.into_iter().map(octet).collect::<Vec<_>>())
}

/// Four nested loops, first octet outermost.
fn nested_loops(octets: &[Octet]) -> Vec<String> {
    let mut out = Vec::new();
    for a in octets[0].values() {
        for b in octets[1].values() {
            for c in octets[2].values() {
                for d in octets[3].values() {
                    out.push(format!("{a}.{b}.{c}.{d}"));
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn expansion_matches_nested_loops(octets in pattern()) {
        let raw = octets.iter().map(Octet::text).collect::<Vec<_>>().join(".");
        let p = HostPattern::parse(&raw).unwrap();
        let want = nested_loops(&octets);
        let widths: u64 = octets.iter().map(|o| o.values().len() as u64).product();
        prop_assert_eq!(p.expansion_count(), widths);
        prop_assert_eq!(expand_pattern(&p), want.clone());
        prop_assert_eq!(expand(&raw).unwrap(), want);
    }
}

fn ident() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_-]{0,8}"
}

fn host() -> impl Strategy<Value = HostEntry> {
    (
        any::<[u8; 4]>(),
        prop::collection::btree_map("[a-z][a-z_]{0,6}", "[A-Za-z0-9./:-]{1,8}", 0..3),
    )
        .prop_map(|(o, vars)| HostEntry {
            address: format!("{}.{}.{}.{}", o[0], o[1], o[2], o[3]),
            vars,
        })
}

fn inventory() -> impl Strategy<Value = Inventory> {
    prop::collection::vec(
        (ident(), prop::collection::vec(host(), 0..6)),
        1..5,
    )
    .prop_map(|groups| {
        let mut map = IndexMap::new();
        for (name, hosts) in groups {
            let mut seen = BTreeMap::new();
            let hosts: Vec<HostEntry> = hosts
                .into_iter()
                .filter(|h| seen.insert(h.address.clone(), ()).is_none())
                .collect();
            map.entry(name.clone()).or_insert(HostGroup { name, hosts });
        }
        Inventory {
            groups: map,
            source_path: None,
        }
    })
}

proptest! {
    #[test]
    fn text_round_trip(inv in inventory()) {
        let text = inv.to_text();
        prop_assert_eq!(parse_inventory(&text).unwrap(), inv);
    }
}

const LISTING: &str = "\
# testbed hosts
[odroids-testgroup]
192.168.1.[1:16] ansible_ssh_pass=odroid

[odroids-testgroup-consumer]
192.168.1.1 ansible_ssh_pass=odroid

[odroids-control]
192.168.[1:8].42 ansible_ssh_pass=odroid
";

#[test]
fn listing_groups_and_order() {
    let inv = parse_inventory(LISTING).unwrap();
    let sizes: Vec<(&str, usize)> = inv.groups.values().map(|g| (g.name.as_str(), g.len())).collect();
    assert_eq!(
        sizes,
        vec![("odroids-testgroup", 16), ("odroids-testgroup-consumer", 1), ("odroids-control", 8)]
    );
    let control: Vec<&str> = inv.resolve_group("odroids-control").unwrap().addresses().collect();
    assert_eq!(control.first(), Some(&"192.168.1.42"));
    assert_eq!(control.last(), Some(&"192.168.8.42"));
    // overlapping membership is two independent entries
    let a = &inv.resolve_group("odroids-testgroup").unwrap().hosts[0];
    let b = &inv.resolve_group("odroids-testgroup-consumer").unwrap().hosts[0];
    assert_eq!(a, b);
}
