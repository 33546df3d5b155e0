use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::SimConn;
use super::shell::{self, CommandFn};
use super::{InitialPower, SimConfig, SimError};
use crate::agent::SensorReading;
use crate::linkshape::{LinkConfig, LinkTable};
use crate::power::{Level, RelayBank, RelayState, SwitchRequest};
use crate::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowerState {
    Off,
    Booting,
    On,
}

impl fmt::Display for PowerState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PowerState::Off => "off",
            PowerState::Booting => "booting",
            PowerState::On => "on",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Control,
    Worker,
}

/// Current draw per power state. Model parameters, not measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurrentProfile {
    pub boot_ua: i32,
    pub idle_ua: i32,
    pub load_ua: i32,
    pub bus_mv: u16,
}

impl Default for CurrentProfile {
    fn default() -> Self {
        Self {
            boot_ua: 1_200_000,
            idle_ua: 500_000,
            load_ua: 900_000,
            bus_mv: 5_000,
        }
    }
}

/// Rack supply with inrush protection: two relay switches closer than the
/// window trip a latched fault.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PowerSupply {
    pub overload_window_ms: u64,
    pub max_switches_in_window: u32,
    last_switch_us: Option<u64>,
    fault: bool,
    switches: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupplyRejection {
    /// This switch tripped the fault.
    Tripped,
    /// The fault was already latched; the switch did not happen.
    Latched,
}

impl PowerSupply {
    pub fn new(overload_window_ms: u64) -> Self {
        Self {
            overload_window_ms,
            max_switches_in_window: 1,
            last_switch_us: None,
            fault: false,
            switches: 0,
        }
    }

    pub fn fault(&self) -> bool {
        self.fault
    }

    pub fn switches(&self) -> u64 {
        self.switches
    }

    pub fn record_switch(&mut self, now_us: u64) -> Result<(), SupplyRejection> {
        if self.fault {
            return Err(SupplyRejection::Latched);
        }
        let window_us = self.overload_window_ms * 1_000;
        let too_close = self
            .last_switch_us
            .is_some_and(|last| now_us.saturating_sub(last) < window_us);
        self.last_switch_us = Some(now_us);
        self.switches += 1;
        if too_close {
            self.fault = true;
            return Err(SupplyRejection::Tripped);
        }
        Ok(())
    }

    pub fn clear_fault(&mut self) {
        self.fault = false;
        self.last_switch_us = None;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimRack {
    pub index: u8,
    pub control: NodeId,
    pub workers: Vec<NodeId>,
    pub bank: RelayBank,
    pub supply: PowerSupply,
    pub(super) pins: BTreeMap<u16, Level>,
}

impl SimRack {
    pub fn pin(&self, pin: u16) -> Level {
        self.pins.get(&pin).copied().unwrap_or(Level::Low)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Unit {
    pub exec_start: String,
    pub log: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct NodeFaults {
    /// Orchestrator connections are refused.
    pub transport_down: bool,
    /// Telemetry dials are refused.
    pub agent_down: bool,
    /// Commands starting with any of these prefixes exit 1.
    pub failing_commands: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimNode {
    pub id: NodeId,
    pub address: String,
    pub rack: u8,
    pub role: NodeRole,
    pub profile: CurrentProfile,
    pub faults: NodeFaults,
    pub(super) power: PowerState,
    pub(super) boot_epoch: u64,
    pub(super) fs: BTreeMap<String, Vec<u8>>,
    pub(super) units: BTreeMap<String, Unit>,
    pub(super) enabled: BTreeSet<String>,
    pub(super) running: BTreeSet<String>,
    pub(super) workload: bool,
}

impl SimNode {
    pub fn power(&self) -> PowerState {
        self.power
    }

    pub fn file(&self, path: &str) -> Option<&[u8]> {
        self.fs.get(path).map(Vec::as_slice)
    }

    pub fn files(&self) -> impl Iterator<Item = &str> {
        self.fs.keys().map(String::as_str)
    }

    pub fn units(&self) -> &BTreeMap<String, Unit> {
        &self.units
    }

    pub fn enabled_services(&self) -> &BTreeSet<String> {
        &self.enabled
    }

    pub fn running_services(&self) -> &BTreeSet<String> {
        &self.running
    }

    /// Running services or an explicit workload raise the draw to the load level.
    pub fn under_load(&self) -> bool {
        self.workload || !self.running.is_empty()
    }

    pub fn agent_reachable(&self) -> bool {
        self.power != PowerState::Off && !self.faults.agent_down
    }

    pub fn transport_reachable(&self) -> bool {
        self.power == PowerState::On && !self.faults.transport_down
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    Gpio { rack: u8, pin: u16, level: u8 },
    RelaySwitched { rack: u8, relay: u8, state: RelayState },
    SwitchRejected { rack: u8, relay: u8 },
    SupplyFault { rack: u8 },
    PowerOn { node: NodeId },
    PowerOff { node: NodeId },
    BootComplete { node: NodeId },
    ServiceStarted { node: NodeId, unit: String },
    ServiceStopped { node: NodeId, unit: String },
    LinkChanged { node: NodeId, delay_ms: u32, rate: String },
    Exec { node: NodeId, exit: i32, command: String },
    ConnOpened { node: NodeId, conn: u64 },
    ConnClosed { node: NodeId, conn: u64 },
}

impl TraceEvent {
    /// Node the event concerns, if it is about one node.
    pub fn node(&self) -> Option<NodeId> {
        match self {
            TraceEvent::PowerOn { node }
            | TraceEvent::PowerOff { node }
            | TraceEvent::BootComplete { node }
            | TraceEvent::ServiceStarted { node, .. }
            | TraceEvent::ServiceStopped { node, .. }
            | TraceEvent::LinkChanged { node, .. }
            | TraceEvent::Exec { node, .. }
            | TraceEvent::ConnOpened { node, .. }
            | TraceEvent::ConnClosed { node, .. } => Some(*node),
            _ => None,
        }
    }
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceEvent::Gpio { rack, pin, level } => write!(f, "gpio rack={rack} pin={pin} level={level}"),
            TraceEvent::RelaySwitched { rack, relay, state } => {
                write!(f, "relay rack={rack} relay={relay} state={state}")
            }
            TraceEvent::SwitchRejected { rack, relay } => {
                write!(f, "switch_rejected rack={rack} relay={relay}")
            }
            TraceEvent::SupplyFault { rack } => write!(f, "supply_fault rack={rack}"),
            TraceEvent::PowerOn { node } => write!(f, "power_on node={node}"),
            TraceEvent::PowerOff { node } => write!(f, "power_off node={node}"),
            TraceEvent::BootComplete { node } => write!(f, "boot_complete node={node}"),
            TraceEvent::ServiceStarted { node, unit } => {
                write!(f, "service_started node={node} unit={unit}")
            }
            TraceEvent::ServiceStopped { node, unit } => {
                write!(f, "service_stopped node={node} unit={unit}")
            }
            TraceEvent::LinkChanged { node, delay_ms, rate } => {
                write!(f, "link node={node} delay_ms={delay_ms} rate={rate}")
            }
            TraceEvent::Exec { node, exit, command } => {
                write!(f, "exec node={node} exit={exit} cmd={command:?}")
            }
            TraceEvent::ConnOpened { node, conn } => write!(f, "conn_open node={node} conn={conn}"),
            TraceEvent::ConnClosed { node, conn } => write!(f, "conn_close node={node} conn={conn}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub t_us: u64,
    #[serde(flatten)]
    pub event: TraceEvent,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.t_us, self.event)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum Scheduled {
    Gpio { rack: u8, pin: u16, level: Level },
    BootComplete { node: NodeId, epoch: u64 },
    Accept { conn: u64 },
    SampleTick { conn: u64 },
}

#[derive(Debug, PartialEq, Eq)]
struct QueueEntry {
    at_us: u64,
    seq: u64,
    event: Scheduled,
}

impl Ord for QueueEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on (time, insertion order).
        (other.at_us, other.seq).cmp(&(self.at_us, self.seq))
    }
}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// The whole simulated testbed: racks, relays, supplies, nodes, links and a
/// virtual microsecond clock. Nothing happens unless time is advanced.
pub struct SimTestbed {
    pub(super) config: SimConfig,
    pub(super) now_us: u64,
    queue: BinaryHeap<QueueEntry>,
    next_seq: u64,
    pub(super) racks: Vec<SimRack>,
    pub(super) nodes: Vec<SimNode>,
    pub(super) links: LinkTable,
    pub(super) conns: BTreeMap<u64, SimConn>,
    pub(super) next_conn: u64,
    trace: Vec<TraceRecord>,
    rng: ChaCha8Rng,
    pub(super) commands: BTreeMap<String, CommandFn>,
    pub(super) node_commands: BTreeMap<(NodeId, String), CommandFn>,
}

impl fmt::Debug for SimTestbed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimTestbed")
            .field("now_us", &self.now_us)
            .field("racks", &self.racks.len())
            .field("nodes", &self.nodes.len())
            .finish_non_exhaustive()
    }
}

pub(super) fn worker_address(rack: u8, slot: u8) -> String {
    format!("192.168.{}.{}", u16::from(rack) + 1, slot)
}

pub(super) const CONTROL_HOST_OCTET: u8 = 42;

impl SimTestbed {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let per_rack = u16::from(config.workers_per_rack) + 1;
        let mut nodes = Vec::new();
        let mut racks = Vec::new();
        for r in 0..config.racks {
            let base = u16::from(r) * per_rack;
            let control = NodeId(base);
            nodes.push(SimNode::new(
                control,
                worker_address(r, CONTROL_HOST_OCTET),
                r,
                NodeRole::Control,
                config.profile,
            ));
            let workers: Vec<NodeId> = (1..per_rack).map(|k| NodeId(base + k)).collect();
            for (k, id) in workers.iter().enumerate() {
                nodes.push(SimNode::new(
                    *id,
                    worker_address(r, k as u8 + 1),
                    r,
                    NodeRole::Worker,
                    config.profile,
                ));
            }
            let bank = RelayBank::contiguous(control, &workers)
                .map_err(|e| SimError::Config(e.to_string()))?;
            racks.push(SimRack {
                index: r,
                control,
                workers,
                bank,
                supply: PowerSupply::new(config.window_ms),
                pins: BTreeMap::new(),
            });
        }
        // Control nodes sit on an unswitched supply.
        for r in &racks {
            nodes[r.control.0 as usize].power = PowerState::On;
        }
        let links = LinkTable::new(nodes.iter().map(|n| n.id));
        let mut tb = Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            now_us: 0,
            queue: BinaryHeap::new(),
            next_seq: 0,
            racks,
            nodes,
            links,
            conns: BTreeMap::new(),
            next_conn: 0,
            trace: Vec::new(),
            commands: shell::default_registry(),
            node_commands: BTreeMap::new(),
        };
        if tb.config.initial_power == InitialPower::On {
            for rack in &mut tb.racks {
                for relay_id in 0..4 {
                    rack.bank.set_state(relay_id, RelayState::On);
                    let pin = rack.bank.relay(relay_id).map(|r| r.gpio_pin).unwrap_or_default();
                    rack.pins.insert(pin, Level::High);
                }
                for w in &rack.workers {
                    tb.nodes[w.0 as usize].power = PowerState::On;
                }
            }
        }
        Ok(tb)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn now_us(&self) -> u64 {
        self.now_us
    }

    pub fn nodes(&self) -> &[SimNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Option<&SimNode> {
        self.nodes.get(id.0 as usize)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut SimNode> {
        self.nodes.get_mut(id.0 as usize)
    }

    pub(super) fn node_ref(&self, id: NodeId) -> Result<&SimNode, SimError> {
        self.node(id).ok_or(SimError::UnknownNode(id))
    }

    pub fn node_by_address(&self, address: &str) -> Option<&SimNode> {
        self.nodes.iter().find(|n| n.address == address)
    }

    pub fn workers(&self) -> impl Iterator<Item = &SimNode> {
        self.nodes.iter().filter(|n| n.role == NodeRole::Worker)
    }

    pub fn racks(&self) -> &[SimRack] {
        &self.racks
    }

    pub fn rack(&self, index: u8) -> Result<&SimRack, SimError> {
        self.racks.get(index as usize).ok_or(SimError::UnknownRack(index))
    }

    pub fn rack_of_bank(&self, bank: NodeId) -> Option<u8> {
        self.racks.iter().find(|r| r.control == bank).map(|r| r.index)
    }

    /// Relay banks with their current relay states, for planning.
    pub fn banks(&self) -> Vec<RelayBank> {
        self.racks.iter().map(|r| r.bank.clone()).collect()
    }

    /// One request per relay powering any of `nodes`. Control nodes and
    /// unknown ids are ignored.
    pub fn requests_for(&self, nodes: &[NodeId], target: RelayState) -> Vec<SwitchRequest> {
        let mut wanted = BTreeSet::new();
        for n in nodes {
            let Some(node) = self.node(*n) else { continue };
            let rack = &self.racks[node.rack as usize];
            if let Some(relay) = rack.bank.relay_powering(*n) {
                wanted.insert((rack.control, relay.relay_id));
            }
        }
        wanted
            .into_iter()
            .map(|(bank, relay_id)| SwitchRequest {
                bank,
                relay_id,
                target,
            })
            .collect()
    }

    pub fn links(&self) -> &LinkTable {
        &self.links
    }

    pub fn apply_link(&mut self, node: NodeId, cfg: LinkConfig) -> Result<LinkConfig, SimError> {
        let prev = self.links.apply(node, cfg).map_err(|_| SimError::UnknownNode(node))?;
        self.record(TraceEvent::LinkChanged {
            node,
            delay_ms: cfg.delay_ms,
            rate: cfg.rate.to_string(),
        });
        Ok(prev)
    }

    pub fn reset_link(&mut self, node: NodeId) -> Result<LinkConfig, SimError> {
        self.apply_link(node, LinkConfig::default())
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    /// Line-delimited `t_us kind key=value ...` text of the whole trace.
    ///
    /// Events at the same instant are grouped by rack, then rack-level
    /// events before node events, then by node. Order within a node or a
    /// rack is kept, so hosts run in parallel dump the same text.
    pub fn trace_dump(&self) -> String {
        let mut records: Vec<&TraceRecord> = self.trace.iter().collect();
        records.sort_by_key(|r| {
            let node = r.event.node();
            let rack = match (&r.event, node) {
                (_, Some(n)) => self.nodes.get(n.0 as usize).map_or(u8::MAX, |s| s.rack),
                (
                    TraceEvent::Gpio { rack, .. }
                    | TraceEvent::RelaySwitched { rack, .. }
                    | TraceEvent::SwitchRejected { rack, .. }
                    | TraceEvent::SupplyFault { rack },
                    None,
                ) => *rack,
                _ => u8::MAX,
            };
            (r.t_us, rack, node)
        });
        let mut out = String::new();
        for r in records {
            out.push_str(&r.to_string());
            out.push('\n');
        }
        out
    }

    pub(super) fn record(&mut self, event: TraceEvent) {
        self.trace.push(TraceRecord {
            t_us: self.now_us,
            event,
        });
    }

    pub(super) fn schedule(&mut self, at_us: u64, event: Scheduled) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(QueueEntry {
            at_us: at_us.max(self.now_us),
            seq,
            event,
        });
    }

    /// Process every event due up to `now + dt_us` in time order (ties in
    /// insertion order), then set the clock to exactly `now + dt_us`.
    /// Returns the trace records produced.
    pub fn advance(&mut self, dt_us: u64) -> Vec<TraceRecord> {
        let target = self.now_us + dt_us;
        let first = self.trace.len();
        while self.queue.peek().is_some_and(|e| e.at_us <= target) {
            let entry = self.queue.pop().expect("peeked");
            self.now_us = entry.at_us;
            self.handle(entry.event);
        }
        self.now_us = target;
        self.trace[first..].to_vec()
    }

    fn handle(&mut self, event: Scheduled) {
        match event {
            Scheduled::Gpio { rack, pin, level } => {
                // Errors are visible in the trace.
                let _ = self.gpio_write(rack, pin, level);
            }
            Scheduled::BootComplete { node, epoch } => self.boot_complete(node, epoch),
            Scheduled::Accept { conn } => self.accept(conn),
            Scheduled::SampleTick { conn } => self.sample_tick(conn),
        }
    }

    /// Drive a control-node GPIO pin now. The level passes the level
    /// shifter; the relay closes when the coil voltage reaches pull-in.
    pub fn gpio_write(&mut self, rack: u8, pin: u16, level: Level) -> Result<(), SimError> {
        let shifter = self.config.shifter;
        let pull_in = self.config.relay_pull_in_v;
        let r = self
            .racks
            .get_mut(rack as usize)
            .ok_or(SimError::UnknownRack(rack))?;
        r.pins.insert(pin, level);
        self.record(TraceEvent::Gpio {
            rack,
            pin,
            level: level.as_digit(),
        });
        let r = &self.racks[rack as usize];
        let Some(relay) = r.bank.relay_for_pin(pin) else {
            return Ok(());
        };
        let relay_id = relay.relay_id;
        let target = if shifter.output_voltage(level) >= pull_in {
            RelayState::On
        } else {
            RelayState::Off
        };
        if relay.state == target {
            return Ok(());
        }
        let now = self.now_us;
        let outcome = self.racks[rack as usize].supply.record_switch(now);
        match outcome {
            Err(SupplyRejection::Latched) => {
                self.record(TraceEvent::SwitchRejected { rack, relay: relay_id });
                return Err(SimError::SupplyFault { rack });
            }
            Err(SupplyRejection::Tripped) => {
                let r = &mut self.racks[rack as usize];
                r.bank.set_state(relay_id, target);
                let workers = r.workers.clone();
                self.record(TraceEvent::RelaySwitched {
                    rack,
                    relay: relay_id,
                    state: target,
                });
                self.record(TraceEvent::SupplyFault { rack });
                tracing::warn!(rack, "supply overload, rack depowered");
                for w in workers {
                    self.power_off(w);
                }
                return Err(SimError::SupplyFault { rack });
            }
            Ok(()) => {}
        }
        let r = &mut self.racks[rack as usize];
        r.bank.set_state(relay_id, target);
        let powered = r
            .bank
            .relay(relay_id)
            .map(|r| r.powered_nodes.clone())
            .unwrap_or_default();
        self.record(TraceEvent::RelaySwitched {
            rack,
            relay: relay_id,
            state: target,
        });
        for n in powered {
            match target {
                RelayState::On => self.power_on(n),
                RelayState::Off => self.power_off(n),
            }
        }
        Ok(())
    }

    pub fn schedule_gpio(&mut self, at_us: u64, rack: u8, pin: u16, level: Level) {
        self.schedule(at_us, Scheduled::Gpio { rack, pin, level });
    }

    fn relay_pin(&self, rack: u8, relay_id: u8) -> Result<u16, SimError> {
        self.rack(rack)?
            .bank
            .relay(relay_id)
            .map(|r| r.gpio_pin)
            .ok_or(SimError::UnknownRelay { rack, relay: relay_id })
    }

    /// Switch a relay now through its pin.
    pub fn switch_relay(&mut self, rack: u8, relay_id: u8, target: RelayState) -> Result<(), SimError> {
        let pin = self.relay_pin(rack, relay_id)?;
        self.gpio_write(rack, pin, target.level())
    }

    pub fn schedule_switch(
        &mut self,
        at_us: u64,
        rack: u8,
        relay_id: u8,
        target: RelayState,
    ) -> Result<(), SimError> {
        let pin = self.relay_pin(rack, relay_id)?;
        self.schedule_gpio(at_us, rack, pin, target.level());
        Ok(())
    }

    /// Clear a latched supply fault (operator intervention).
    pub fn reset_supply(&mut self, rack: u8) -> Result<(), SimError> {
        self.racks
            .get_mut(rack as usize)
            .ok_or(SimError::UnknownRack(rack))?
            .supply
            .clear_fault();
        Ok(())
    }

    fn power_on(&mut self, id: NodeId) {
        let boot_us = self.config.boot_ms * 1_000;
        let now = self.now_us;
        let node = &mut self.nodes[id.0 as usize];
        if node.power != PowerState::Off {
            return;
        }
        node.power = PowerState::Booting;
        node.boot_epoch += 1;
        let epoch = node.boot_epoch;
        self.record(TraceEvent::PowerOn { node: id });
        self.schedule(now + boot_us, Scheduled::BootComplete { node: id, epoch });
    }

    fn power_off(&mut self, id: NodeId) {
        let node = &mut self.nodes[id.0 as usize];
        if node.power == PowerState::Off {
            return;
        }
        node.power = PowerState::Off;
        node.boot_epoch += 1;
        node.workload = false;
        node.running.clear();
        self.record(TraceEvent::PowerOff { node: id });
        self.drop_connections(id);
    }

    fn boot_complete(&mut self, id: NodeId, epoch: u64) {
        let node = &mut self.nodes[id.0 as usize];
        if node.boot_epoch != epoch || node.power != PowerState::Booting {
            return;
        }
        node.power = PowerState::On;
        let enabled: Vec<String> = node.enabled.iter().cloned().collect();
        self.record(TraceEvent::BootComplete { node: id });
        for unit in enabled {
            self.start_service(id, &unit);
        }
    }

    pub(super) fn start_service(&mut self, id: NodeId, unit: &str) -> bool {
        let now = self.now_us;
        let node = &mut self.nodes[id.0 as usize];
        let Some(u) = node.units.get(unit).cloned() else {
            return false;
        };
        if !node.running.insert(unit.to_string()) {
            return true;
        }
        if let Some(log) = &u.log {
            let line = format!("{now} {unit}: started {}\n", u.exec_start);
            node.fs.entry(log.clone()).or_default().extend_from_slice(line.as_bytes());
        }
        self.record(TraceEvent::ServiceStarted {
            node: id,
            unit: unit.to_string(),
        });
        true
    }

    pub(super) fn stop_service(&mut self, id: NodeId, unit: &str) {
        if self.nodes[id.0 as usize].running.remove(unit) {
            self.record(TraceEvent::ServiceStopped {
                node: id,
                unit: unit.to_string(),
            });
        }
    }

    /// Profile draw for the node's present state, without noise.
    pub fn nominal_current(&self, id: NodeId) -> Result<SensorReading, SimError> {
        let node = self.node_ref(id)?;
        let p = node.profile;
        let (current_ua, bus_mv) = match node.power {
            PowerState::Off => (0, 0),
            PowerState::Booting => (p.boot_ua, p.bus_mv),
            PowerState::On if node.under_load() => (p.load_ua, p.bus_mv),
            PowerState::On => (p.idle_ua, p.bus_mv),
        };
        Ok(SensorReading {
            current_ua,
            bus_mv,
            read_at_us: self.now_us,
        })
    }

    /// What the node's current monitor reads right now.
    pub fn sim_current(&mut self, id: NodeId) -> Result<SensorReading, SimError> {
        let mut reading = self.nominal_current(id)?;
        let noise = self.config.noise_ua;
        if noise > 0 && reading.bus_mv > 0 {
            let n = i32::try_from(noise).unwrap_or(i32::MAX);
            reading.current_ua = reading.current_ua.saturating_add(self.rng.gen_range(-n..=n));
        }
        Ok(reading)
    }

    pub fn write_file(&mut self, id: NodeId, path: &str, bytes: &[u8]) -> Result<(), SimError> {
        self.node_mut(id)
            .ok_or(SimError::UnknownNode(id))?
            .fs
            .insert(path.to_string(), bytes.to_vec());
        Ok(())
    }

    /// Inventory text matching the topology: the documented groups plus
    /// `odroids-workers` and one `rack-N` group per rack (N from 1).
    pub fn inventory_text(&self) -> String {
        let racks = self.config.racks;
        let w = self.config.workers_per_rack;
        let mut out = String::from("# Simulated testbed inventory\n\n");
        out.push_str(&format!(
            "[odroids-testgroup]\n192.168.1.[1:{w}] ansible_ssh_pass=odroid\n\n"
        ));
        out.push_str("[odroids-testgroup-consumer]\n192.168.1.1 ansible_ssh_pass=odroid\n\n");
        out.push_str(&format!(
            "[odroids-control]\n192.168.[1:{racks}].{CONTROL_HOST_OCTET} ansible_ssh_pass=odroid\n\n"
        ));
        out.push_str(&format!(
            "[odroids-workers]\n192.168.[1:{racks}].[1:{w}] ansible_ssh_pass=odroid\n"
        ));
        for r in 1..=racks {
            out.push_str(&format!("\n[rack-{r}]\n192.168.{r}.[1:{w}] ansible_ssh_pass=odroid\n"));
        }
        out
    }
}

impl SimNode {
    fn new(id: NodeId, address: String, rack: u8, role: NodeRole, profile: CurrentProfile) -> Self {
        Self {
            id,
            address,
            rack,
            role,
            profile,
            faults: NodeFaults::default(),
            power: PowerState::Off,
            boot_epoch: 0,
            fs: BTreeMap::new(),
            units: BTreeMap::new(),
            enabled: BTreeSet::new(),
            running: BTreeSet::new(),
            workload: false,
        }
    }
}
