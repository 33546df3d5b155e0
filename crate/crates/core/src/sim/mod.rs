//! Discrete-event simulator of the testbed hardware.
//!
//! One [`SimTestbed`] holds racks of relay-switched workers, the supplies
//! feeding them, per-node link shaping and telemetry agents. Time is virtual
//! and only moves through [`SimTestbed::advance`]. A [`SimHandle`] shares a
//! testbed between threads and doubles as a [`Clock`], so the same planners,
//! executors and collectors used against hardware run against it.

mod adapters;
mod net;
mod shell;
mod testbed;

use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Duration;

use thiserror::Error;

pub use adapters::{execute_plan_on_sim, SimGpio, SimSensor, SimTransport, SimTransportFactory};
pub use net::{collect, collect_into, ConnEvent, DialError, COLLECT_GRACE_US, COLLECT_STEP_US};
pub use shell::{CommandFn, Invocation};
pub use testbed::{
    CurrentProfile, NodeFaults, NodeRole, PowerState, PowerSupply, SimNode, SimRack, SimTestbed,
    SupplyRejection, TraceEvent, TraceRecord, Unit,
};

use crate::agent::{DEFAULT_AGENT_PORT, DEFAULT_SAMPLE_PERIOD_MS};
use crate::clock::Clock;
use crate::kv::{KvError, KvFile};
use crate::power::LevelShifter;
use crate::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitialPower {
    #[default]
    Off,
    On,
}

impl FromStr for InitialPower {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(InitialPower::Off),
            "on" => Ok(InitialPower::On),
            other => Err(format!("expected on or off, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub racks: u8,
    pub workers_per_rack: u8,
    pub boot_ms: u64,
    /// Supply overload window.
    pub window_ms: u64,
    pub profile: CurrentProfile,
    pub shifter: LevelShifter,
    /// Coil voltage at which a relay closes.
    pub relay_pull_in_v: f64,
    pub seed: u64,
    /// Uniform sensor noise amplitude; 0 gives exact readings.
    pub noise_ua: u32,
    pub agent_port: u16,
    pub sample_period_ms: u32,
    /// Worker power at t=0. Control nodes are always on.
    pub initial_power: InitialPower,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            racks: 8,
            workers_per_rack: 16,
            boot_ms: 5_000,
            window_ms: 500,
            profile: CurrentProfile::default(),
            shifter: LevelShifter::default(),
            relay_pull_in_v: 3.75,
            seed: 0,
            noise_ua: 0,
            agent_port: DEFAULT_AGENT_PORT,
            sample_period_ms: DEFAULT_SAMPLE_PERIOD_MS,
            initial_power: InitialPower::Off,
        }
    }
}

const SCENARIO_KEYS: &[&str] = &[
    "racks",
    "workers_per_rack",
    "boot_ms",
    "window_ms",
    "boot_ua",
    "idle_ua",
    "load_ua",
    "bus_mv",
    "seed",
    "noise_ua",
    "sample_period_ms",
    "agent_port",
    "initial_power",
    "pull_in_v",
];

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.racks == 0 || self.racks > 254 {
            return bad("racks must be in 1..=254");
        }
        if self.workers_per_rack == 0 || self.workers_per_rack >= 42 {
            return bad("workers_per_rack must be in 1..=41");
        }
        if !self.workers_per_rack.is_multiple_of(4) {
            return bad("workers_per_rack must split evenly over 4 relays");
        }
        if self.sample_period_ms == 0 {
            return bad("sample_period_ms must be positive");
        }
        if self.window_ms == 0 {
            return bad("window_ms must be positive");
        }
        if self.relay_pull_in_v.is_nan() || self.relay_pull_in_v <= 0.0 {
            return bad("pull_in_v must be positive");
        }
        Ok(())
    }

    /// Overlay scenario keys on `self`.
    pub fn merge_kv(mut self, kv: &KvFile) -> Result<Self, SimError> {
        kv.check_keys(SCENARIO_KEYS)?;
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.parsed($key)? {
                    $field = v;
                }
            };
        }
        set!("racks", self.racks);
        set!("workers_per_rack", self.workers_per_rack);
        set!("boot_ms", self.boot_ms);
        set!("window_ms", self.window_ms);
        set!("boot_ua", self.profile.boot_ua);
        set!("idle_ua", self.profile.idle_ua);
        set!("load_ua", self.profile.load_ua);
        set!("bus_mv", self.profile.bus_mv);
        set!("seed", self.seed);
        set!("noise_ua", self.noise_ua);
        set!("sample_period_ms", self.sample_period_ms);
        set!("agent_port", self.agent_port);
        set!("initial_power", self.initial_power);
        set!("pull_in_v", self.relay_pull_in_v);
        self.validate()?;
        Ok(self)
    }
}

/// Parse a `key=value` scenario on top of the defaults.
pub fn parse_scenario(text: &str) -> Result<SimConfig, SimError> {
    SimConfig::default().merge_kv(&KvFile::parse(text)?)
}

pub fn load_scenario(path: &Path) -> Result<SimConfig, SimError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
    parse_scenario(&text)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("no rack {0}")]
    UnknownRack(u8),
    #[error("rack {rack} has no relay {relay}")]
    UnknownRelay { rack: u8, relay: u8 },
    #[error("no node {0}")]
    UnknownNode(NodeId),
    #[error("no node at {0}")]
    UnknownAddress(String),
    #[error("rack {rack}: supply fault latched")]
    SupplyFault { rack: u8 },
    #[error("scenario: {0}")]
    Config(String),
}

impl From<KvError> for SimError {
    fn from(e: KvError) -> Self {
        SimError::Config(e.to_string())
    }
}

/// How sleeping on a [`SimHandle`] relates to virtual time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeMode {
    /// A sleeper advances the simulation to its own deadline.
    Driven,
    /// Something else advances the simulation; sleepers wait for it.
    Paced,
}

struct Shared {
    tb: Mutex<SimTestbed>,
    tick: Condvar,
    paced: AtomicBool,
}

/// Thread-safe shared testbed. Cloning gives another handle to the same one.
#[derive(Clone)]
pub struct SimHandle {
    shared: Arc<Shared>,
}

impl std::fmt::Debug for SimHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimHandle")
            .field("mode", &self.mode())
            .finish_non_exhaustive()
    }
}

impl SimHandle {
    pub fn new(tb: SimTestbed) -> Self {
        Self {
            shared: Arc::new(Shared {
                tb: Mutex::new(tb),
                tick: Condvar::new(),
                paced: AtomicBool::new(false),
            }),
        }
    }

    pub fn from_config(config: SimConfig) -> Result<Self, SimError> {
        Ok(Self::new(SimTestbed::new(config)?))
    }

    pub fn lock(&self) -> MutexGuard<'_, SimTestbed> {
        self.shared.tb.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn advance(&self, dt_us: u64) -> Vec<TraceRecord> {
        let out = self.lock().advance(dt_us);
        self.shared.tick.notify_all();
        out
    }

    pub fn set_mode(&self, mode: TimeMode) {
        self.shared.paced.store(mode == TimeMode::Paced, Ordering::SeqCst);
        self.shared.tick.notify_all();
    }

    pub fn mode(&self) -> TimeMode {
        if self.shared.paced.load(Ordering::SeqCst) {
            TimeMode::Paced
        } else {
            TimeMode::Driven
        }
    }

    /// Advance in `step_us` increments until `done` holds or `limit_us` of
    /// virtual time has passed. Returns whether `done` held.
    pub fn run_until(&self, limit_us: u64, step_us: u64, mut done: impl FnMut(&SimTestbed) -> bool) -> bool {
        let end = self.now_us() + limit_us;
        loop {
            {
                let tb = self.lock();
                if done(&tb) {
                    return true;
                }
                if tb.now_us() >= end {
                    return false;
                }
            }
            let now = self.now_us();
            self.advance(step_us.max(1).min(end - now));
        }
    }
}

impl Clock for SimHandle {
    fn now_us(&self) -> u64 {
        self.lock().now_us()
    }

    fn sleep_until_us(&self, deadline_us: u64) {
        let mut tb = self.lock();
        loop {
            let now = tb.now_us();
            if now >= deadline_us {
                return;
            }
            if !self.shared.paced.load(Ordering::SeqCst) {
                tb.advance(deadline_us - now);
                drop(tb);
                self.shared.tick.notify_all();
                return;
            }
            tb = self
                .shared
                .tick
                .wait_timeout(tb, Duration::from_millis(50))
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_overrides_and_rejects() {
        let cfg = parse_scenario("racks=2\n# c\nboot_ms=100\ninitial_power=on\npull_in_v=4.5\n").unwrap();
        assert_eq!(cfg.racks, 2);
        assert_eq!(cfg.boot_ms, 100);
        assert_eq!(cfg.initial_power, InitialPower::On);
        assert_eq!(cfg.relay_pull_in_v, 4.5);
        assert_eq!(cfg.workers_per_rack, 16);
        assert!(parse_scenario("rackz=2").is_err());
        assert!(parse_scenario("racks=0").is_err());
        assert!(parse_scenario("workers_per_rack=42").is_err());
        assert!(parse_scenario("initial_power=maybe").is_err());
    }

    #[test]
    fn driven_sleep_moves_virtual_time() {
        let h = SimHandle::from_config(SimConfig { racks: 1, ..SimConfig::default() }).unwrap();
        h.sleep_until_us(1_500);
        assert_eq!(h.now_us(), 1_500);
        h.sleep_until_us(10);
        assert_eq!(h.now_us(), 1_500);
    }

    #[test]
    fn paced_sleep_waits_for_the_pacer() {
        let h = SimHandle::from_config(SimConfig { racks: 1, ..SimConfig::default() }).unwrap();
        h.set_mode(TimeMode::Paced);
        let pacer = {
            let h = h.clone();
            std::thread::spawn(move || {
                for _ in 0..20 {
                    std::thread::sleep(Duration::from_millis(1));
                    h.advance(100_000);
                }
            })
        };
        h.sleep_until_us(1_000_000);
        assert!(h.now_us() >= 1_000_000);
        pacer.join().unwrap();
        assert_eq!(h.now_us(), 2_000_000);
    }

    #[test]
    fn run_until_stops_at_predicate_or_limit() {
        let h = SimHandle::from_config(SimConfig { racks: 1, ..SimConfig::default() }).unwrap();
        h.lock().schedule_switch(0, 0, 0, crate::power::RelayState::On).unwrap();
        assert!(h.run_until(10_000_000, 100_000, |tb| {
            tb.node(NodeId(1)).unwrap().power() == PowerState::On
        }));
        assert_eq!(h.now_us(), 5_000_000);
        assert!(!h.run_until(300_000, 100_000, |_| false));
        assert_eq!(h.now_us(), 5_300_000);
    }
}
