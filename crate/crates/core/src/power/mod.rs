//! Relay power control: the GPIO pin → level shifter → relay chain, staggered
//! switching plans, plan execution and shell-script rendering.
//!
//! A control node drives a bank of four relays; each relay switches the supply
//! of a subset of the rack's workers. Switching several relays at once on the
//! same supply causes inrush spikes, so every plan spaces transitions within a
//! bank by at least the stagger interval.

mod exec;
mod plan;
mod script;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::NodeId;

pub use exec::{
    execute_plan, BankBusy, BankDrivers, BankLocks, BankToken, DriverFault, ExecutedTransition,
    ExecutionReport, GpioDriver, MemoryGpio, Outcome,
};
pub use plan::{plan_switch, PlanOptions, SwitchRequest, Transition, TransitionPlan};
pub use script::{
    parse_gpio_script, render_gpio_script, GpioProgram, GpioScript, ScriptError, ScriptExit,
    ScriptMode, ScriptWrite,
};

pub const RELAYS_PER_BANK: usize = 4;
pub const DEFAULT_STAGGER_MS: u64 = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelayState {
    Off,
    On,
}

impl RelayState {
    pub fn level(self) -> Level {
        match self {
            RelayState::Off => Level::Low,
            RelayState::On => Level::High,
        }
    }

    pub fn toggled(self) -> Self {
        match self {
            RelayState::Off => RelayState::On,
            RelayState::On => RelayState::Off,
        }
    }
}

impl fmt::Display for RelayState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RelayState::Off => "off",
            RelayState::On => "on",
        })
    }
}

impl std::str::FromStr for RelayState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "on" | "On" | "ON" | "1" => Ok(RelayState::On),
            "off" | "Off" | "OFF" | "0" => Ok(RelayState::Off),
            other => Err(format!("expected on|off, got {other:?}")),
        }
    }
}

/// Logical GPIO level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    Low,
    High,
}

impl Level {
    pub fn as_digit(self) -> u8 {
        match self {
            Level::Low => 0,
            Level::High => 1,
        }
    }
}

/// 3.3 V GPIO logic → 5 V relay drive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelShifter {
    pub input_level_v: f64,
    pub output_level_v: f64,
}

impl Default for LevelShifter {
    fn default() -> Self {
        Self {
            input_level_v: 3.3,
            output_level_v: 5.0,
        }
    }
}

impl LevelShifter {
    /// Voltage on the GPIO side for a logical level.
    pub fn input_voltage(&self, level: Level) -> f64 {
        match level {
            Level::High => self.input_level_v,
            Level::Low => 0.0,
        }
    }

    /// Voltage presented to the relay coil.
    pub fn output_voltage(&self, level: Level) -> f64 {
        match level {
            Level::High => self.output_level_v,
            Level::Low => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Relay {
    pub relay_id: u8,
    pub gpio_pin: u16,
    pub state: RelayState,
    pub powered_nodes: Vec<NodeId>,
}

/// The four relays on one control node's relay board.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RelayBank {
    pub control_node_id: NodeId,
    relays: [Relay; RELAYS_PER_BANK],
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PowerError {
    #[error("stagger interval must be at least 1 ms")]
    InvalidStagger,
    #[error("no relay bank on control node {0}")]
    UnknownBank(NodeId),
    #[error("bank {bank} has no relay {relay_id}")]
    UnknownRelay { bank: NodeId, relay_id: u8 },
    #[error("relay {relay_id} of bank {bank} requested with conflicting targets")]
    DuplicateRequest { bank: NodeId, relay_id: u8 },
    #[error("plan spans more than one bank")]
    MultiBankPlan,
    #[error("invalid bank layout: {0}")]
    InvalidBank(String),
}

impl RelayBank {
    /// Build a bank from per-relay pins and node lists. All relays start Off.
    pub fn new(
        control_node_id: NodeId,
        pins: [u16; RELAYS_PER_BANK],
        powered: [Vec<NodeId>; RELAYS_PER_BANK],
    ) -> Result<Self, PowerError> {
        let mut seen = std::collections::HashSet::new();
        for nodes in &powered {
            for n in nodes {
                if !seen.insert(*n) {
                    return Err(PowerError::InvalidBank(format!(
                        "node {n} is powered by two relays"
                    )));
                }
            }
        }
        let mut pin_set = std::collections::HashSet::new();
        if !pins.iter().all(|p| pin_set.insert(*p)) {
            return Err(PowerError::InvalidBank("duplicate gpio pin".into()));
        }
        let mut powered = powered.into_iter();
        let relays = std::array::from_fn(|i| Relay {
            relay_id: i as u8,
            gpio_pin: pins[i],
            state: RelayState::Off,
            powered_nodes: powered.next().unwrap_or_default(),
        });
        Ok(Self {
            control_node_id,
            relays,
        })
    }

    /// Default wiring: workers split into four contiguous runs, one per relay,
    /// pins 0..3.
    pub fn contiguous(control_node_id: NodeId, workers: &[NodeId]) -> Result<Self, PowerError> {
        let per_relay = workers.len().div_ceil(RELAYS_PER_BANK);
        let mut chunks = workers.chunks(per_relay.max(1));
        let powered = std::array::from_fn(|_| chunks.next().map(<[_]>::to_vec).unwrap_or_default());
        Self::new(control_node_id, [0, 1, 2, 3], powered)
    }

    pub fn relays(&self) -> &[Relay; RELAYS_PER_BANK] {
        &self.relays
    }

    pub fn relay(&self, relay_id: u8) -> Option<&Relay> {
        self.relays.get(relay_id as usize)
    }

    pub fn relay_for_pin(&self, pin: u16) -> Option<&Relay> {
        self.relays.iter().find(|r| r.gpio_pin == pin)
    }

    pub fn relay_powering(&self, node: NodeId) -> Option<&Relay> {
        self.relays.iter().find(|r| r.powered_nodes.contains(&node))
    }

    /// Fold the outcome of an executed plan into the bank's relay states.
    pub fn apply_report(&mut self, report: &ExecutionReport) {
        for entry in &report.entries {
            if entry.bank == self.control_node_id && entry.outcome.is_done() {
                if let Some(r) = self.relays.get_mut(entry.relay_id as usize) {
                    r.state = entry.target;
                }
            }
        }
    }

    pub(crate) fn set_state(&mut self, relay_id: u8, state: RelayState) {
        if let Some(r) = self.relays.get_mut(relay_id as usize) {
            r.state = state;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(r: std::ops::Range<u16>) -> Vec<NodeId> {
        r.map(NodeId).collect()
    }

    #[test]
    fn contiguous_mapping_puts_four_workers_on_each_relay() {
        let bank = RelayBank::contiguous(NodeId(0), &ids(1..17)).unwrap();
        assert_eq!(bank.relays().len(), 4);
        for (i, relay) in bank.relays().iter().enumerate() {
            assert_eq!(relay.relay_id as usize, i);
            assert_eq!(relay.gpio_pin as usize, i);
            assert_eq!(relay.state, RelayState::Off);
            let start = 1 + 4 * i as u16;
            assert_eq!(relay.powered_nodes, ids(start..start + 4));
        }
        assert_eq!(bank.relay_powering(NodeId(7)).unwrap().relay_id, 1);
    }

    #[test]
    fn overlapping_relays_are_rejected() {
        let err = RelayBank::new(
            NodeId(0),
            [0, 1, 2, 3],
            [vec![NodeId(1)], vec![NodeId(1)], vec![], vec![]],
        )
        .unwrap_err();
        assert!(matches!(err, PowerError::InvalidBank(_)));
        assert!(RelayBank::new(NodeId(0), [0, 0, 2, 3], Default::default()).is_err());
    }

    #[test]
    fn level_shifter_maps_high_to_five_volts() {
        let ls = LevelShifter::default();
        assert_eq!(ls.output_voltage(Level::High), 5.0);
        assert_eq!(ls.output_voltage(Level::Low), 0.0);
        assert_eq!(ls.input_voltage(Level::High), 3.3);
    }

    #[test]
    fn relay_state_parsing() {
        assert_eq!("on".parse::<RelayState>(), Ok(RelayState::On));
        assert_eq!("0".parse::<RelayState>(), Ok(RelayState::Off));
        assert!("maybe".parse::<RelayState>().is_err());
        assert_eq!(RelayState::On.level(), Level::High);
    }
}
