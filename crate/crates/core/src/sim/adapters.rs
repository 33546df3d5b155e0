//! Hardware-facing traits implemented on top of the simulator.

use super::{SimError, SimHandle};
use crate::agent::{SensorDriver, SensorFault, SensorReading};
use crate::orchestrator::{ExecOutput, Transport, TransportError, TransportFactory};
use crate::power::{execute_plan, BankDrivers, DriverFault, ExecutionReport, GpioDriver, Level, TransitionPlan};
use crate::NodeId;

/// GPIO pins of one rack's control node.
#[derive(Debug, Clone)]
pub struct SimGpio {
    handle: SimHandle,
    rack: u8,
}

impl SimGpio {
    pub fn new(handle: SimHandle, rack: u8) -> Self {
        Self { handle, rack }
    }
}

impl GpioDriver for SimGpio {
    fn write(&mut self, pin: u16, level: Level) -> Result<(), DriverFault> {
        self.handle
            .lock()
            .gpio_write(self.rack, pin, level)
            .map_err(|e| DriverFault {
                pin,
                reason: e.to_string(),
            })
    }

    fn read(&self, pin: u16) -> Result<Level, DriverFault> {
        let tb = self.handle.lock();
        tb.rack(self.rack).map(|r| r.pin(pin)).map_err(|e| DriverFault {
            pin,
            reason: e.to_string(),
        })
    }
}

/// Current monitor of one node.
#[derive(Debug, Clone)]
pub struct SimSensor {
    handle: SimHandle,
    node: NodeId,
}

impl SimSensor {
    pub fn new(handle: SimHandle, node: NodeId) -> Self {
        Self { handle, node }
    }
}

impl SensorDriver for SimSensor {
    fn read(&mut self) -> Result<SensorReading, SensorFault> {
        self.handle
            .lock()
            .sim_current(self.node)
            .map_err(|e| SensorFault(e.to_string()))
    }
}

/// Execute `plan` with one [`SimGpio`] per bank, timed on the simulator clock.
pub fn execute_plan_on_sim(handle: &SimHandle, plan: &TransitionPlan) -> ExecutionReport {
    let mut drivers = BankDrivers::new();
    {
        let tb = handle.lock();
        for rack in tb.racks() {
            drivers.insert(rack.control, SimGpio::new(handle.clone(), rack.index));
        }
    }
    execute_plan(plan, &mut drivers, handle)
}

/// Remote sessions to simulated nodes, addressed by IP.
#[derive(Debug, Clone)]
pub struct SimTransportFactory {
    handle: SimHandle,
}

impl SimTransportFactory {
    pub fn new(handle: SimHandle) -> Self {
        Self { handle }
    }
}

#[derive(Debug)]
pub struct SimTransport {
    handle: SimHandle,
    node: NodeId,
    host: String,
}

impl SimTransport {
    fn check(&self) -> Result<(), TransportError> {
        let tb = self.handle.lock();
        match tb.node(self.node) {
            Some(n) if n.transport_reachable() => Ok(()),
            _ => Err(TransportError::Io(format!("{}: connection reset", self.host))),
        }
    }
}

impl TransportFactory for SimTransportFactory {
    fn connect(&self, host: &str) -> Result<Box<dyn Transport>, TransportError> {
        let tb = self.handle.lock();
        let refuse = |reason: String| TransportError::ConnectFailure {
            host: host.to_string(),
            reason,
        };
        let node = tb
            .node_by_address(host)
            .ok_or_else(|| refuse(SimError::UnknownAddress(host.to_string()).to_string()))?;
        if !node.transport_reachable() {
            return Err(refuse(format!("host is {}", node.power())));
        }
        Ok(Box::new(SimTransport {
            handle: self.handle.clone(),
            node: node.id,
            host: host.to_string(),
        }))
    }
}

impl Transport for SimTransport {
    fn copy(&mut self, bytes: &[u8], dest: &str) -> Result<(), TransportError> {
        self.check()?;
        self.handle
            .lock()
            .write_file(self.node, dest, bytes)
            .map_err(|e| TransportError::Io(e.to_string()))
    }

    fn exec(&mut self, command: &str, privileged: bool) -> Result<ExecOutput, TransportError> {
        self.check()?;
        self.handle
            .lock()
            .exec(self.node, command, privileged)
            .map_err(|e| TransportError::Io(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::power::{plan_switch, PlanOptions, RelayState};
    use crate::sim::{PowerState, SimConfig};

    #[test]
    fn plan_on_sim_staggers_and_boots() {
        let h = SimHandle::from_config(SimConfig { racks: 2, ..SimConfig::default() }).unwrap();
        let (banks, reqs) = {
            let tb = h.lock();
            let ids: Vec<NodeId> = tb.workers().map(|w| w.id).collect();
            (tb.banks(), tb.requests_for(&ids, RelayState::On))
        };
        let plan = plan_switch(&banks, &reqs, &PlanOptions::default()).unwrap();
        let report = execute_plan_on_sim(&h, &plan);
        assert!(report.all_done(), "{report:?}");
        h.advance(6_000_000);
        let tb = h.lock();
        assert!(tb.workers().all(|w| w.power() == PowerState::On));
        assert!(tb.racks().iter().all(|r| !r.supply.fault()));
    }

    #[test]
    fn transport_refuses_powered_off_nodes() {
        let h = SimHandle::from_config(SimConfig { racks: 1, ..SimConfig::default() }).unwrap();
        let f = SimTransportFactory::new(h.clone());
        assert!(f.connect("192.168.1.1").is_err());
        assert!(f.connect("10.0.0.1").is_err());
        let mut t = f.connect("192.168.1.42").unwrap();
        t.copy(b"hi", "/tmp/x").unwrap();
        assert_eq!(t.exec("cat /tmp/x", false).unwrap().stdout, "hi");
        let mut s = SimSensor::new(h, NodeId(0));
        assert_eq!(s.read().unwrap().current_ua, 500_000);
    }
}
