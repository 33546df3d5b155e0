use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{PowerError, RelayBank, RelayState, DEFAULT_STAGGER_MS};
use crate::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchRequest {
    pub bank: NodeId,
    pub relay_id: u8,
    pub target: RelayState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanOptions {
    pub stagger_ms: u64,
    /// Space transitions across *all* banks, not just within one. Off by
    /// default: each rack has its own supply.
    pub global_stagger: bool,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            stagger_ms: DEFAULT_STAGGER_MS,
            global_stagger: false,
        }
    }
}

impl PlanOptions {
    pub fn with_stagger(stagger_ms: u64) -> Self {
        Self {
            stagger_ms,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub bank: NodeId,
    pub relay_id: u8,
    pub gpio_pin: u16,
    pub target: RelayState,
    /// Offset from plan start.
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TransitionPlan {
    pub stagger_ms: u64,
    /// Sorted by `(at_ms, bank, relay_id)`.
    pub transitions: Vec<Transition>,
}

impl TransitionPlan {
    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn banks(&self) -> Vec<NodeId> {
        let mut banks: Vec<_> = self.transitions.iter().map(|t| t.bank).collect();
        banks.sort();
        banks.dedup();
        banks
    }

    /// Transitions of one bank, in plan order.
    pub fn for_bank(&self, bank: NodeId) -> impl Iterator<Item = &Transition> {
        self.transitions.iter().filter(move |t| t.bank == bank)
    }

    /// Offset of the last transition.
    pub fn span_ms(&self) -> u64 {
        self.transitions.iter().map(|t| t.at_ms).max().unwrap_or(0)
    }
}

/// Schedule the effective (non-no-op) requests so that transitions on one
/// bank are `stagger_ms` apart, in ascending relay order.
pub fn plan_switch(
    banks: &[RelayBank],
    requests: &[SwitchRequest],
    opts: &PlanOptions,
) -> Result<TransitionPlan, PowerError> {
    if opts.stagger_ms == 0 {
        return Err(PowerError::InvalidStagger);
    }
    let by_id: BTreeMap<NodeId, &RelayBank> =
        banks.iter().map(|b| (b.control_node_id, b)).collect();

    let mut wanted: BTreeMap<(NodeId, u8), RelayState> = BTreeMap::new();
    for req in requests {
        let bank = by_id
            .get(&req.bank)
            .ok_or(PowerError::UnknownBank(req.bank))?;
        if bank.relay(req.relay_id).is_none() {
            return Err(PowerError::UnknownRelay {
                bank: req.bank,
                relay_id: req.relay_id,
            });
        }
        match wanted.insert((req.bank, req.relay_id), req.target) {
            Some(prev) if prev != req.target => {
                return Err(PowerError::DuplicateRequest {
                    bank: req.bank,
                    relay_id: req.relay_id,
                })
            }
            _ => {}
        }
    }

    let mut transitions = Vec::new();
    let mut slot_per_bank: BTreeMap<NodeId, u64> = BTreeMap::new();
    let mut global_slot = 0u64;
    // BTreeMap order is (bank, relay_id) ascending.
    for ((bank_id, relay_id), target) in wanted {
        let relay = by_id[&bank_id].relay(relay_id).expect("validated above");
        if relay.state == target {
            continue;
        }
        let slot = if opts.global_stagger {
            let s = global_slot;
            global_slot += 1;
            s
        } else {
            let s = slot_per_bank.entry(bank_id).or_insert(0);
            let v = *s;
            *s += 1;
            v
        };
        transitions.push(Transition {
            bank: bank_id,
            relay_id,
            gpio_pin: relay.gpio_pin,
            target,
            at_ms: slot * opts.stagger_ms,
        });
    }
    transitions.sort_by_key(|t| (t.at_ms, t.bank, t.relay_id));
    Ok(TransitionPlan {
        stagger_ms: opts.stagger_ms,
        transitions,
    })
}
