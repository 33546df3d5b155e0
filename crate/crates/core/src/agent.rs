//! Per-node sensor agent: reads current and bus voltage at a fixed period and
//! streams them to every connected collector.
//!
//! The agent listens; collectors dial in. Each connection gets its own
//! [`AgentSession`] so sequence numbers start at 0 and are gapless per
//! connection.

use std::future::Future;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::AsyncWriteExt;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;
use tokio::task::JoinSet;
use tokio::time::MissedTickBehavior;

use crate::clock::Clock;
use crate::kv::{KvError, KvFile};
use crate::wire::{encode, Hello, Message, TelemetrySample};

pub const DEFAULT_SAMPLE_PERIOD_MS: u32 = 100;
pub const DEFAULT_AGENT_PORT: u16 = 4231;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorReading {
    pub current_ua: i32,
    pub bus_mv: u16,
    /// Agent-clock microseconds.
    pub read_at_us: u64,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("sensor fault: {0}")]
pub struct SensorFault(pub String);

/// Access to a current/voltage monitor.
pub trait SensorDriver: Send {
    fn init(&mut self) -> Result<(), SensorFault> {
        Ok(())
    }
    fn read(&mut self) -> Result<SensorReading, SensorFault>;
}

impl<D: SensorDriver + ?Sized> SensorDriver for Box<D> {
    fn init(&mut self) -> Result<(), SensorFault> {
        (**self).init()
    }
    fn read(&mut self) -> Result<SensorReading, SensorFault> {
        (**self).read()
    }
}

pub fn read_sensor(driver: &mut dyn SensorDriver) -> Result<SensorReading, SensorFault> {
    driver.read()
}

/// One step of a piecewise-constant current profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileStep {
    pub from_us: u64,
    pub current_ua: i32,
    pub bus_mv: u16,
}

/// Piecewise-constant profile over agent time: the last step whose
/// `from_us` is not after `t` applies. Before the first step the output is 0/0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PiecewiseProfile {
    steps: Vec<ProfileStep>,
}

impl PiecewiseProfile {
    pub fn new(mut steps: Vec<ProfileStep>) -> Self {
        steps.sort_by_key(|s| s.from_us);
        Self { steps }
    }

    pub fn constant(current_ua: i32, bus_mv: u16) -> Self {
        Self::new(vec![ProfileStep {
            from_us: 0,
            current_ua,
            bus_mv,
        }])
    }

    /// Boot surge for `boot_us`, then idle.
    pub fn boot_then_idle(surge_ua: i32, idle_ua: i32, bus_mv: u16, boot_us: u64) -> Self {
        Self::new(vec![
            ProfileStep {
                from_us: 0,
                current_ua: surge_ua,
                bus_mv,
            },
            ProfileStep {
                from_us: boot_us,
                current_ua: idle_ua,
                bus_mv,
            },
        ])
    }

    pub fn at(&self, t_us: u64) -> (i32, u16) {
        let idx = self.steps.partition_point(|s| s.from_us <= t_us);
        match idx {
            0 => (0, 0),
            i => (self.steps[i - 1].current_ua, self.steps[i - 1].bus_mv),
        }
    }
}

/// Simulated sensor evaluating a profile on a clock.
pub struct ProfileSensor {
    clock: Arc<dyn Clock>,
    profile: PiecewiseProfile,
}

impl ProfileSensor {
    pub fn new(clock: Arc<dyn Clock>, profile: PiecewiseProfile) -> Self {
        Self { clock, profile }
    }
}

impl SensorDriver for ProfileSensor {
    fn read(&mut self) -> Result<SensorReading, SensorFault> {
        let now = self.clock.now_us();
        let (current_ua, bus_mv) = self.profile.at(now);
        Ok(SensorReading {
            current_ua,
            bus_mv,
            read_at_us: now,
        })
    }
}

/// Wraps a driver and fails every `n`-th read.
pub struct FlakySensor<D> {
    inner: D,
    every: u64,
    reads: u64,
}

impl<D> FlakySensor<D> {
    pub fn new(inner: D, every: u64) -> Self {
        Self {
            inner,
            every: every.max(1),
            reads: 0,
        }
    }
}

impl<D: SensorDriver> SensorDriver for FlakySensor<D> {
    fn read(&mut self) -> Result<SensorReading, SensorFault> {
        self.reads += 1;
        if self.reads.is_multiple_of(self.every) {
            return Err(SensorFault(format!("injected fault on read {}", self.reads)));
        }
        self.inner.read()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriverKind {
    Simulated,
    Hardware,
}

impl FromStr for DriverKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "simulated" | "sim" => Ok(DriverKind::Simulated),
            "hardware" | "ina231" => Ok(DriverKind::Hardware),
            other => Err(format!("unknown driver {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentConfig {
    pub node_id: u16,
    pub bind_addr: IpAddr,
    pub listen_port: u16,
    pub sample_period_ms: u32,
    pub driver: DriverKind,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            node_id: 0,
            bind_addr: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            listen_port: DEFAULT_AGENT_PORT,
            sample_period_ms: DEFAULT_SAMPLE_PERIOD_MS,
            driver: DriverKind::Simulated,
        }
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("sample period must be at least 1 ms")]
    ZeroPeriod,
    #[error(transparent)]
    Config(#[from] KvError),
    #[error(transparent)]
    Sensor(#[from] SensorFault),
}

impl AgentConfig {
    /// Overlay values from a flat config file on top of `self`.
    pub fn merge_kv(mut self, kv: &KvFile) -> Result<Self, AgentError> {
        kv.check_keys(&["node_id", "bind", "port", "period_ms", "driver"])?;
        if let Some(v) = kv.parsed("node_id")? {
            self.node_id = v;
        }
        if let Some(v) = kv.parsed("bind")? {
            self.bind_addr = v;
        }
        if let Some(v) = kv.parsed("port")? {
            self.listen_port = v;
        }
        if let Some(v) = kv.parsed("period_ms")? {
            self.sample_period_ms = v;
        }
        if let Some(v) = kv.parsed("driver")? {
            self.driver = v;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if self.sample_period_ms == 0 {
            return Err(AgentError::ZeroPeriod);
        }
        Ok(())
    }
}

/// Message sequence for one collector connection: Hello, Samples, Bye.
#[derive(Debug, Clone)]
pub struct AgentSession {
    node_id: u16,
    sample_period_ms: u32,
    next_seq: u64,
    faults: u64,
}

impl AgentSession {
    pub fn new(node_id: u16, sample_period_ms: u32) -> Self {
        Self {
            node_id,
            sample_period_ms,
            next_seq: 0,
            faults: 0,
        }
    }

    pub fn hello(&self) -> Message {
        Message::Hello(Hello {
            node_id: self.node_id,
            sample_period_ms: self.sample_period_ms,
        })
    }

    /// Turn a reading into the next Sample. A faulted read becomes a zero
    /// current sample stamped `now_us`; the session carries on.
    pub fn sample(&mut self, reading: Result<SensorReading, SensorFault>, now_us: u64) -> Message {
        let (current_ua, bus_mv, timestamp_us) = match reading {
            Ok(r) => (r.current_ua, r.bus_mv, r.read_at_us),
            Err(fault) => {
                self.faults += 1;
                tracing::warn!(node = self.node_id, %fault, "substituting zero sample");
                (0, 0, now_us)
            }
        };
        let seq = self.next_seq;
        self.next_seq += 1;
        Message::Sample(TelemetrySample {
            node_id: self.node_id,
            seq,
            timestamp_us,
            current_ua,
            bus_mv,
        })
    }

    pub fn bye(&self) -> Message {
        Message::Bye
    }

    pub fn samples_sent(&self) -> u64 {
        self.next_seq
    }

    pub fn faults(&self) -> u64 {
        self.faults
    }
}

/// Serve telemetry on `config.listen_port` until `shutdown` resolves.
///
/// Every open connection receives Bye before the listener returns. The
/// `ready` callback gets the bound address (useful with port 0).
pub async fn run_agent<D, F>(
    config: AgentConfig,
    driver: D,
    clock: Arc<dyn Clock>,
    shutdown: F,
    ready: impl FnOnce(SocketAddr),
) -> Result<(), AgentError>
where
    D: SensorDriver + 'static,
    F: Future<Output = ()>,
{
    config.validate()?;
    let mut driver = driver;
    driver.init()?;
    let driver = Arc::new(Mutex::new(driver));
    let addr = SocketAddr::new(config.bind_addr, config.listen_port);
    let listener = TcpListener::bind(addr)
        .await
        .map_err(|source| AgentError::BindFailure { addr, source })?;
    let local = listener
        .local_addr()
        .map_err(|source| AgentError::BindFailure { addr, source })?;
    ready(local);
    tracing::info!(node = config.node_id, %local, "agent listening");

    let (stop_tx, stop_rx) = watch::channel(false);
    let mut connections = JoinSet::new();
    tokio::pin!(shutdown);
    loop {
        tokio::select! {
            _ = &mut shutdown => break,
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    tracing::debug!(%peer, "collector connected");
                    let session = AgentSession::new(config.node_id, config.sample_period_ms);
                    connections.spawn(serve_connection(
                        stream,
                        session,
                        driver.clone(),
                        clock.clone(),
                        stop_rx.clone(),
                    ));
                }
                Err(e) => tracing::warn!(error = %e, "accept failed"),
            },
            Some(_) = connections.join_next(), if !connections.is_empty() => {}
        }
    }
    let _ = stop_tx.send(true);
    while connections.join_next().await.is_some() {}
    Ok(())
}

async fn serve_connection<D: SensorDriver>(
    mut stream: TcpStream,
    mut session: AgentSession,
    driver: Arc<Mutex<D>>,
    clock: Arc<dyn Clock>,
    mut stop: watch::Receiver<bool>,
) {
    let _ = stream.set_nodelay(true);
    if stream.write_all(&encode(&session.hello())).await.is_err() {
        return;
    }
    let period = Duration::from_millis(u64::from(session.sample_period_ms));
    let mut ticks = tokio::time::interval(period);
    ticks.set_missed_tick_behavior(MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            _ = stop.changed() => {
                let _ = stream.write_all(&encode(&session.bye())).await;
                let _ = stream.shutdown().await;
                return;
            }
            _ = ticks.tick() => {
                let reading = driver.lock().expect("sensor driver poisoned").read();
                let msg = session.sample(reading, clock.now_us());
                if let Err(e) = stream.write_all(&encode(&msg)).await {
                    tracing::debug!(error = %e, "dropping collector connection");
                    return;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;

    #[test]
    fn constant_profile_reading() {
        let clock = Arc::new(ManualClock::new());
        let mut sensor = ProfileSensor::new(clock.clone(), PiecewiseProfile::constant(250_000, 5_000));
        clock.advance_us(123);
        assert_eq!(
            read_sensor(&mut sensor).unwrap(),
            SensorReading {
                current_ua: 250_000,
                bus_mv: 5_000,
                read_at_us: 123
            }
        );
    }

    #[test]
    fn piecewise_profile_lookup() {
        let p = PiecewiseProfile::new(vec![
            ProfileStep {
                from_us: 50_000,
                current_ua: 1_200_000,
                bus_mv: 5_000,
            },
            ProfileStep {
                from_us: 0,
                current_ua: 1_500_000,
                bus_mv: 4_900,
            },
            ProfileStep {
                from_us: 200_000,
                current_ua: 800_000,
                bus_mv: 5_000,
            },
        ]);
        assert_eq!(p.at(0), (1_500_000, 4_900));
        assert_eq!(p.at(49_999), (1_500_000, 4_900));
        assert_eq!(p.at(100_000), (1_200_000, 5_000));
        assert_eq!(p.at(200_000), (800_000, 5_000));
        let late = PiecewiseProfile::new(vec![ProfileStep {
            from_us: 10,
            current_ua: 1,
            bus_mv: 1,
        }]);
        assert_eq!(late.at(9), (0, 0));
    }

    #[test]
    fn session_sequence_and_fault_substitution() {
        let mut s = AgentSession::new(9, 100);
        assert_eq!(
            s.hello(),
            Message::Hello(Hello {
                node_id: 9,
                sample_period_ms: 100
            })
        );
        let ok = SensorReading {
            current_ua: 5,
            bus_mv: 6,
            read_at_us: 7,
        };
        let Message::Sample(a) = s.sample(Ok(ok), 1_000) else {
            panic!()
        };
        let Message::Sample(b) = s.sample(Err(SensorFault("i2c".into())), 2_000) else {
            panic!()
        };
        assert_eq!((a.seq, a.timestamp_us, a.current_ua), (0, 7, 5));
        assert_eq!((b.seq, b.timestamp_us, b.current_ua, b.bus_mv), (1, 2_000, 0, 0));
        assert_eq!(s.faults(), 1);
        assert_eq!(s.samples_sent(), 2);
    }

    #[test]
    fn config_from_kv() {
        let kv = KvFile::parse("node_id=12\nport=0\nperiod_ms=20\ndriver=simulated").unwrap();
        let cfg = AgentConfig::default().merge_kv(&kv).unwrap();
        assert_eq!((cfg.node_id, cfg.listen_port, cfg.sample_period_ms), (12, 0, 20));
        let bad = KvFile::parse("period_ms=0").unwrap();
        assert!(matches!(
            AgentConfig::default().merge_kv(&bad),
            Err(AgentError::ZeroPeriod)
        ));
        let unknown = KvFile::parse("colour=blue").unwrap();
        assert!(matches!(
            AgentConfig::default().merge_kv(&unknown),
            Err(AgentError::Config(KvError::UnknownKey(_)))
        ));
    }

    #[test]
    fn flaky_sensor_fails_periodically() {
        let clock: Arc<dyn Clock> = Arc::new(ManualClock::new());
        let mut s = FlakySensor::new(ProfileSensor::new(clock, PiecewiseProfile::constant(1, 1)), 3);
        let results: Vec<bool> = (0..6).map(|_| s.read().is_ok()).collect();
        assert_eq!(results, vec![true, true, false, true, true, false]);
    }
}
