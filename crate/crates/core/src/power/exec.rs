use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::{Arc, Mutex};

use serde::Serialize;
use thiserror::Error;

use super::{Level, RelayState, TransitionPlan};
use crate::clock::Clock;
use crate::NodeId;

#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize)]
#[error("gpio pin {pin}: {reason}")]
pub struct DriverFault {
    pub pin: u16,
    pub reason: String,
}

/// Access to the GPIO pins of one control node.
pub trait GpioDriver: Send {
    fn write(&mut self, pin: u16, level: Level) -> Result<(), DriverFault>;
    fn read(&self, pin: u16) -> Result<Level, DriverFault>;
}

/// Drivers keyed by bank (control node).
#[derive(Default)]
pub struct BankDrivers<'a> {
    drivers: BTreeMap<NodeId, Box<dyn GpioDriver + 'a>>,
}

impl<'a> BankDrivers<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, bank: NodeId, driver: impl GpioDriver + 'a) {
        self.drivers.insert(bank, Box::new(driver));
    }

    pub fn with(mut self, bank: NodeId, driver: impl GpioDriver + 'a) -> Self {
        self.insert(bank, driver);
        self
    }

    fn get_mut(&mut self, bank: NodeId) -> Option<&mut (dyn GpioDriver + 'a)> {
        self.drivers.get_mut(&bank).map(|d| &mut **d)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Outcome {
    Done { at_us: u64 },
    Failed { at_us: u64, reason: String },
    Skipped,
}

impl Outcome {
    pub fn is_done(&self) -> bool {
        matches!(self, Outcome::Done { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExecutedTransition {
    pub bank: NodeId,
    pub relay_id: u8,
    pub gpio_pin: u16,
    pub target: RelayState,
    pub scheduled_at_us: u64,
    pub outcome: Outcome,
    /// Relay state once this entry was processed.
    pub resulting_state: RelayState,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ExecutionReport {
    pub started_at_us: u64,
    pub entries: Vec<ExecutedTransition>,
}

impl ExecutionReport {
    pub fn all_done(&self) -> bool {
        self.entries.iter().all(|e| e.outcome.is_done())
    }

    pub fn final_states(&self) -> BTreeMap<(NodeId, u8), RelayState> {
        self.entries
            .iter()
            .map(|e| ((e.bank, e.relay_id), e.resulting_state))
            .collect()
    }
}

/// Run a plan against the drivers, waiting on `clock` for each offset.
///
/// A driver fault aborts the remaining transitions of that bank only. A
/// late wake-up never shortens the planned gap to the bank's previous
/// write: each write waits for its offset and for the planned distance
/// from when the previous write actually happened.
pub fn execute_plan(
    plan: &TransitionPlan,
    drivers: &mut BankDrivers<'_>,
    clock: &dyn Clock,
) -> ExecutionReport {
    let started_at_us = clock.now_us();
    let mut aborted: HashSet<NodeId> = HashSet::new();
    let mut last_write: HashMap<NodeId, (u64, u64)> = HashMap::new();
    let mut entries = Vec::with_capacity(plan.transitions.len());

    for t in &plan.transitions {
        let scheduled_at_us = started_at_us + t.at_ms * 1_000;
        let previous = t.target.toggled();
        let outcome = if aborted.contains(&t.bank) {
            Outcome::Skipped
        } else {
            let earliest = last_write
                .get(&t.bank)
                .map_or(scheduled_at_us, |&(done_us, planned_ms)| {
                    scheduled_at_us.max(done_us + t.at_ms.saturating_sub(planned_ms) * 1_000)
                });
            clock.sleep_until_us(earliest);
            let result = match drivers.get_mut(t.bank) {
                Some(driver) => driver.write(t.gpio_pin, t.target.level()),
                None => Err(DriverFault {
                    pin: t.gpio_pin,
                    reason: format!("no driver for bank {}", t.bank),
                }),
            };
            let at_us = clock.now_us();
            last_write.insert(t.bank, (at_us, t.at_ms));
            match result {
                Ok(()) => Outcome::Done { at_us },
                Err(fault) => {
                    tracing::warn!(bank = %t.bank, relay = t.relay_id, %fault, "relay write failed");
                    aborted.insert(t.bank);
                    Outcome::Failed {
                        at_us,
                        reason: fault.to_string(),
                    }
                }
            }
        };
        let resulting_state = if outcome.is_done() { t.target } else { previous };
        entries.push(ExecutedTransition {
            bank: t.bank,
            relay_id: t.relay_id,
            gpio_pin: t.gpio_pin,
            target: t.target,
            scheduled_at_us,
            outcome,
            resulting_state,
        });
    }
    ExecutionReport {
        started_at_us,
        entries,
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("bank {0} is already being switched")]
pub struct BankBusy(pub NodeId);

/// Registry of banks with a running executor.
#[derive(Debug, Clone, Default)]
pub struct BankLocks {
    held: Arc<Mutex<BTreeSet<NodeId>>>,
}

impl BankLocks {
    pub fn new() -> Self {
        Self::default()
    }

    /// Take the exclusive execution token for `bank`.
    pub fn try_acquire(&self, bank: NodeId) -> Result<BankToken, BankBusy> {
        let mut held = self.held.lock().expect("bank lock poisoned");
        if !held.insert(bank) {
            return Err(BankBusy(bank));
        }
        Ok(BankToken {
            locks: self.clone(),
            bank,
        })
    }

    pub fn is_held(&self, bank: NodeId) -> bool {
        self.held.lock().expect("bank lock poisoned").contains(&bank)
    }
}

/// Held for as long as an executor may switch the bank; released on drop.
#[derive(Debug)]
pub struct BankToken {
    locks: BankLocks,
    bank: NodeId,
}

impl BankToken {
    pub fn bank(&self) -> NodeId {
        self.bank
    }
}

impl Drop for BankToken {
    fn drop(&mut self) {
        if let Ok(mut held) = self.locks.held.lock() {
            held.remove(&self.bank);
        }
    }
}

#[derive(Debug, Default)]
struct MemoryGpioState {
    levels: BTreeMap<u16, Level>,
    writes: Vec<(u16, Level)>,
    fail_on_write: Option<usize>,
}

/// In-memory pin bank with write logging and fault injection. Clones share state.
#[derive(Debug, Clone, Default)]
pub struct MemoryGpio {
    state: Arc<Mutex<MemoryGpioState>>,
}

impl MemoryGpio {
    pub fn new() -> Self {
        Self::default()
    }

    /// Make the `n`-th write (1-based) fail.
    pub fn fail_on_write(self, n: usize) -> Self {
        self.state.lock().unwrap().fail_on_write = Some(n);
        self
    }

    pub fn writes(&self) -> Vec<(u16, Level)> {
        self.state.lock().unwrap().writes.clone()
    }

    pub fn level(&self, pin: u16) -> Level {
        self.state
            .lock()
            .unwrap()
            .levels
            .get(&pin)
            .copied()
            .unwrap_or(Level::Low)
    }
}

impl GpioDriver for MemoryGpio {
    fn write(&mut self, pin: u16, level: Level) -> Result<(), DriverFault> {
        let mut st = self.state.lock().unwrap();
        let attempt = st.writes.len() + 1;
        st.writes.push((pin, level));
        if st.fail_on_write == Some(attempt) {
            return Err(DriverFault {
                pin,
                reason: "injected write fault".into(),
            });
        }
        st.levels.insert(pin, level);
        Ok(())
    }

    fn read(&self, pin: u16) -> Result<Level, DriverFault> {
        Ok(self.level(pin))
    }
}
