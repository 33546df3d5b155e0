//! Central telemetry collector: dials agents, keeps per-node time series and
//! integrates energy with the trapezoidal rule.
//!
//! The collection window is measured on the agents' own timestamps: a node's
//! window opens at its first sample and closes `duration` later. Samples at
//! the closing instant are kept. This keeps the measured span independent of
//! link latency.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::AsyncReadExt;
use tokio::net::TcpStream;

use crate::inventory::HostGroup;
use crate::wire::{DecodeError, FrameDecoder, Hello, Message, TelemetrySample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub timestamp_us: u64,
    pub current_ua: i32,
    pub bus_mv: u16,
}

impl SeriesPoint {
    pub fn power_w(&self) -> f64 {
        (f64::from(self.current_ua) * 1e-6) * (f64::from(self.bus_mv) * 1e-3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConnectionState {
    Connected,
    Lost,
}

/// Samples from one agent, in strictly increasing timestamp order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeSeries {
    pub address: String,
    pub node_id: Option<u16>,
    pub samples: Vec<SeriesPoint>,
    pub connection_state: ConnectionState,
    /// Out-of-order, duplicate or foreign samples that were discarded.
    pub dropped: u64,
    pub error: Option<String>,
    #[serde(skip)]
    last_seq: Option<u64>,
}

impl NodeSeries {
    pub fn new(address: impl Into<String>) -> Self {
        Self {
            address: address.into(),
            node_id: None,
            samples: Vec::new(),
            connection_state: ConnectionState::Connected,
            dropped: 0,
            error: None,
            last_seq: None,
        }
    }

    pub fn lost(address: impl Into<String>, error: impl Into<String>) -> Self {
        Self {
            connection_state: ConnectionState::Lost,
            error: Some(error.into()),
            ..Self::new(address)
        }
    }

    /// Append if it moves the series forward; otherwise count it as dropped.
    pub fn push(&mut self, sample: &TelemetrySample) -> bool {
        let stale_seq = self.last_seq.is_some_and(|s| sample.seq <= s);
        let stale_ts = self
            .samples
            .last()
            .is_some_and(|p| sample.timestamp_us <= p.timestamp_us);
        let foreign = self.node_id.is_some_and(|id| id != sample.node_id);
        if stale_seq || stale_ts || foreign {
            self.dropped += 1;
            return false;
        }
        self.last_seq = Some(sample.seq);
        self.samples.push(SeriesPoint {
            timestamp_us: sample.timestamp_us,
            current_ua: sample.current_ua,
            bus_mv: sample.bus_mv,
        });
        true
    }

    pub fn duration_s(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => (b.timestamp_us - a.timestamp_us) as f64 * 1e-6,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyEstimate {
    pub energy_j: f64,
    /// Fewer than two samples: nothing to integrate.
    pub insufficient_samples: bool,
}

/// Trapezoidal energy over a series: Σ (Pᵢ + Pᵢ₊₁)/2 · Δt.
///
/// Accumulated as an integer in µA·mV·µs and converted once at the end, so
/// the result is the correctly rounded value of the exact sum.
pub fn integrate_energy(samples: &[SeriesPoint]) -> EnergyEstimate {
    if samples.len() < 2 {
        return EnergyEstimate {
            energy_j: 0.0,
            insufficient_samples: true,
        };
    }
    let raw_power = |p: &SeriesPoint| i128::from(p.current_ua) * i128::from(p.bus_mv);
    let twice: i128 = samples
        .windows(2)
        .map(|w| {
            let dt = i128::from(w[1].timestamp_us - w[0].timestamp_us);
            (raw_power(&w[0]) + raw_power(&w[1])) * dt
        })
        .sum();
    EnergyEstimate {
        energy_j: twice as f64 / 2e15,
        insufficient_samples: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEnergy {
    pub node_id: u16,
    pub duration_s: f64,
    pub energy_j: f64,
    pub mean_power_w: f64,
    pub sample_count: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyReport {
    /// Sorted by node id.
    pub nodes: Vec<NodeEnergy>,
    pub total_energy_j: f64,
    pub warnings: Vec<String>,
}

impl EnergyReport {
    pub fn from_nodes(mut nodes: Vec<NodeEnergy>, warnings: Vec<String>) -> Self {
        nodes.sort_by_key(|n| n.node_id);
        let total_energy_j = nodes.iter().map(|n| n.energy_j).sum();
        Self {
            nodes,
            total_energy_j,
            warnings,
        }
    }

    pub fn node(&self, node_id: u16) -> Option<&NodeEnergy> {
        self.nodes.iter().find(|n| n.node_id == node_id)
    }
}

pub type SeriesMap = BTreeMap<String, NodeSeries>;

pub fn energy_report(series: &SeriesMap) -> EnergyReport {
    let mut nodes = Vec::new();
    let mut warnings = Vec::new();
    for s in series.values() {
        let Some(node_id) = s.node_id else {
            warnings.push(format!("{}: no telemetry received", s.address));
            continue;
        };
        let est = integrate_energy(&s.samples);
        if est.insufficient_samples {
            warnings.push(format!(
                "node {node_id}: {} sample(s), energy reported as 0",
                s.samples.len()
            ));
        }
        let duration_s = s.duration_s();
        nodes.push(NodeEnergy {
            node_id,
            duration_s,
            energy_j: est.energy_j,
            mean_power_w: if duration_s > 0.0 {
                est.energy_j / duration_s
            } else {
                0.0
            },
            sample_count: s.samples.len() as u64,
        });
    }
    EnergyReport::from_nodes(nodes, warnings)
}

/// Shared series map with snapshot reads.
#[derive(Debug, Clone, Default)]
pub struct SeriesStore {
    inner: Arc<RwLock<SeriesMap>>,
}

impl SeriesStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> SeriesMap {
        self.inner.read().expect("series store poisoned").clone()
    }

    pub fn update<R>(&self, address: &str, f: impl FnOnce(&mut NodeSeries) -> R) -> R {
        let mut map = self.inner.write().expect("series store poisoned");
        let entry = map
            .entry(address.to_string())
            .or_insert_with(|| NodeSeries::new(address));
        f(entry)
    }

    pub fn into_map(self) -> SeriesMap {
        match Arc::try_unwrap(self.inner) {
            Ok(lock) => lock.into_inner().expect("series store poisoned"),
            Err(shared) => shared.read().expect("series store poisoned").clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestStatus {
    /// Keep reading.
    Open,
    /// Window complete; close the connection.
    Complete,
    /// Agent said goodbye.
    Bye,
}

/// Protocol handling for one agent connection, independent of the transport.
#[derive(Debug)]
pub struct Ingest {
    address: String,
    store: SeriesStore,
    decoder: FrameDecoder,
    window_us: u64,
    window_start: Option<u64>,
    hello: Option<Hello>,
    status: IngestStatus,
}

impl Ingest {
    pub fn new(address: impl Into<String>, store: SeriesStore, window: Duration) -> Self {
        let address = address.into();
        store.update(&address, |_| ());
        Self {
            address,
            store,
            decoder: FrameDecoder::new(),
            window_us: window.as_micros() as u64,
            window_start: None,
            hello: None,
            status: IngestStatus::Open,
        }
    }

    pub fn hello(&self) -> Option<Hello> {
        self.hello
    }

    pub fn status(&self) -> IngestStatus {
        self.status
    }

    /// Feed received bytes. A decode error is fatal for the connection and
    /// marks the series Lost.
    pub fn feed(&mut self, bytes: &[u8]) -> Result<IngestStatus, DecodeError> {
        if self.status != IngestStatus::Open {
            return Ok(self.status);
        }
        self.decoder.push(bytes);
        loop {
            let msg = match self.decoder.next_message() {
                Ok(Some(m)) => m,
                Ok(None) => return Ok(self.status),
                Err(e) => {
                    self.fail(e.to_string());
                    return Err(e);
                }
            };
            match msg {
                Message::Hello(h) => {
                    self.hello = Some(h);
                    self.store.update(&self.address, |s| s.node_id = Some(h.node_id));
                }
                Message::Sample(sample) => {
                    if self.hello.is_none() {
                        self.store.update(&self.address, |s| s.dropped += 1);
                        continue;
                    }
                    let start = *self.window_start.get_or_insert(sample.timestamp_us);
                    if sample.timestamp_us > start + self.window_us {
                        self.status = IngestStatus::Complete;
                        return Ok(self.status);
                    }
                    self.store.update(&self.address, |s| s.push(&sample));
                }
                Message::Bye => {
                    self.status = IngestStatus::Bye;
                    return Ok(self.status);
                }
            }
        }
    }

    /// The transport closed. Before the window completed this counts as a loss.
    pub fn closed(&mut self) {
        if self.status == IngestStatus::Open {
            self.fail("connection closed mid-run".into());
        }
    }

    pub fn fail(&mut self, error: String) {
        self.status = IngestStatus::Complete;
        self.store.update(&self.address, |s| {
            s.connection_state = ConnectionState::Lost;
            s.error = Some(error);
        });
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CollectOptions {
    pub connect_timeout: Duration,
    /// Extra wall time allowed beyond `duration` for the window to complete.
    pub grace: Duration,
}

impl Default for CollectOptions {
    fn default() -> Self {
        Self {
            connect_timeout: Duration::from_secs(2),
            grace: Duration::from_secs(2),
        }
    }
}

/// Dial every host of `group` over TCP and record telemetry for `duration`.
/// Per-host failures are recorded in the series, never raised.
pub async fn run_collection(
    group: &HostGroup,
    agent_port: u16,
    duration: Duration,
    opts: CollectOptions,
) -> SeriesMap {
    let store = SeriesStore::new();
    collect_into(&store, group, agent_port, duration, opts).await;
    store.into_map()
}

/// As [`run_collection`], writing into a caller-owned store so others can
/// read snapshots while the run is in progress.
pub async fn collect_into(
    store: &SeriesStore,
    group: &HostGroup,
    agent_port: u16,
    duration: Duration,
    opts: CollectOptions,
) {
    let mut tasks = tokio::task::JoinSet::new();
    for address in group.addresses() {
        let address = address.to_string();
        let store = store.clone();
        tasks.spawn(collect_one(store, address, agent_port, duration, opts));
    }
    while tasks.join_next().await.is_some() {}
}

async fn collect_one(
    store: SeriesStore,
    address: String,
    port: u16,
    duration: Duration,
    opts: CollectOptions,
) {
    let connect = tokio::time::timeout(
        opts.connect_timeout,
        TcpStream::connect((address.as_str(), port)),
    )
    .await;
    let mut stream = match connect {
        Ok(Ok(s)) => s,
        Ok(Err(e)) => {
            store.update(&address, |s| *s = NodeSeries::lost(&address, e.to_string()));
            return;
        }
        Err(_) => {
            store.update(&address, |s| *s = NodeSeries::lost(&address, "connect timed out"));
            return;
        }
    };
    let mut ingest = Ingest::new(address.clone(), store, duration);
    if duration.is_zero() {
        return;
    }
    let deadline = tokio::time::Instant::now() + duration + opts.grace;
    let mut buf = [0u8; 4096];
    loop {
        match tokio::time::timeout_at(deadline, stream.read(&mut buf)).await {
            Err(_) => {
                if ingest.hello().is_none() {
                    ingest.fail("no telemetry before deadline".into());
                }
                return;
            }
            Ok(Ok(0)) => {
                ingest.closed();
                return;
            }
            Ok(Ok(n)) => match ingest.feed(&buf[..n]) {
                Ok(IngestStatus::Open) => {}
                Ok(_) | Err(_) => return,
            },
            Ok(Err(e)) => {
                ingest.fail(e.to_string());
                return;
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("csv i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv format error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct SeriesRow {
    node_id: u16,
    timestamp_us: u64,
    #[serde(rename = "current_uA")]
    current_ua: i32,
    #[serde(rename = "bus_mV")]
    bus_mv: u16,
}

#[derive(Debug, Serialize, Deserialize)]
struct ReportRow {
    node_id: u16,
    duration_s: f64,
    #[serde(rename = "energy_J")]
    energy_j: f64,
    #[serde(rename = "mean_power_W")]
    mean_power_w: f64,
    sample_count: u64,
}

pub const SERIES_CSV_HEADER: &str = "node_id,timestamp_us,current_uA,bus_mV";
pub const REPORT_CSV_HEADER: &str = "node_id,duration_s,energy_J,mean_power_W,sample_count";

/// Series rows sorted by node then timestamp. Series without a node id have
/// no rows.
pub fn write_series_csv<W: std::io::Write>(series: &SeriesMap, out: W) -> Result<(), CsvError> {
    let mut rows: Vec<SeriesRow> = series
        .values()
        .filter_map(|s| s.node_id.map(|id| (id, s)))
        .flat_map(|(node_id, s)| {
            s.samples.iter().map(move |p| SeriesRow {
                node_id,
                timestamp_us: p.timestamp_us,
                current_ua: p.current_ua,
                bus_mv: p.bus_mv,
            })
        })
        .collect();
    rows.sort_by_key(|r| (r.node_id, r.timestamp_us));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(SERIES_CSV_HEADER.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report_csv<W: std::io::Write>(report: &EnergyReport, out: W) -> Result<(), CsvError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(REPORT_CSV_HEADER.split(','))?;
    for n in &report.nodes {
        w.serialize(ReportRow {
            node_id: n.node_id,
            duration_s: n.duration_s,
            energy_j: n.energy_j,
            mean_power_w: n.mean_power_w,
            sample_count: n.sample_count,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_series_csv(series: &SeriesMap, path: impl AsRef<Path>) -> Result<(), CsvError> {
    write_series_csv(series, std::fs::File::create(path)?)
}

pub fn export_report_csv(report: &EnergyReport, path: impl AsRef<Path>) -> Result<(), CsvError> {
    write_report_csv(report, std::fs::File::create(path)?)
}

/// Read a series CSV back. Series are keyed by node id since addresses are
/// not part of the format.
pub fn read_series_csv<R: std::io::Read>(input: R) -> Result<SeriesMap, CsvError> {
    let mut map = SeriesMap::new();
    for row in csv::Reader::from_reader(input).deserialize::<SeriesRow>() {
        let row = row?;
        let key = row.node_id.to_string();
        let s = map.entry(key.clone()).or_insert_with(|| {
            let mut s = NodeSeries::new(key);
            s.node_id = Some(row.node_id);
            s
        });
        s.samples.push(SeriesPoint {
            timestamp_us: row.timestamp_us,
            current_ua: row.current_ua,
            bus_mv: row.bus_mv,
        });
    }
    Ok(map)
}

pub fn read_report_csv<R: std::io::Read>(input: R) -> Result<EnergyReport, CsvError> {
    let mut nodes = Vec::new();
    for row in csv::Reader::from_reader(input).deserialize::<ReportRow>() {
        let r = row?;
        nodes.push(NodeEnergy {
            node_id: r.node_id,
            duration_s: r.duration_s,
            energy_j: r.energy_j,
            mean_power_w: r.mean_power_w,
            sample_count: r.sample_count,
        });
    }
    Ok(EnergyReport::from_nodes(nodes, Vec::new()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::encode;

    fn point(t_s: f64, amps: f64, volts: f64) -> SeriesPoint {
        SeriesPoint {
            timestamp_us: (t_s * 1e6).round() as u64,
            current_ua: (amps * 1e6).round() as i32,
            bus_mv: (volts * 1e3).round() as u16,
        }
    }

    #[test]
    fn constant_five_watts_for_ten_seconds() {
        for n in [2usize, 3, 11, 101] {
            let samples: Vec<_> = (0..n)
                .map(|i| point(10.0 * i as f64 / (n - 1) as f64, 1.0, 5.0))
                .collect();
            let e = integrate_energy(&samples);
            assert_eq!(e.energy_j, 50.0, "{n} samples");
            assert!(!e.insufficient_samples);
        }
    }

    #[test]
    fn hand_trapezoid() {
        let samples = [point(0.0, 0.5, 5.0), point(1.0, 1.5, 5.0), point(2.0, 0.5, 5.0)];
        assert_eq!(integrate_energy(&samples).energy_j, 10.0);
    }

    #[test]
    fn fewer_than_two_samples_warns() {
        let e = integrate_energy(&[point(0.0, 1.0, 5.0)]);
        assert_eq!(e.energy_j, 0.0);
        assert!(e.insufficient_samples);
        assert!(integrate_energy(&[]).insufficient_samples);
    }

    fn sample(seq: u64, ts: u64) -> TelemetrySample {
        TelemetrySample {
            node_id: 1,
            seq,
            timestamp_us: ts,
            current_ua: 1,
            bus_mv: 1,
        }
    }

    #[test]
    fn out_of_order_and_duplicates_are_dropped() {
        let mut s = NodeSeries::new("a");
        assert!(s.push(&sample(0, 10)));
        assert!(s.push(&sample(1, 20)));
        assert!(!s.push(&sample(1, 30)));
        assert!(!s.push(&sample(2, 20)));
        assert!(s.push(&sample(5, 40)));
        assert_eq!(s.samples.len(), 3);
        assert_eq!(s.dropped, 2);
    }

    #[test]
    fn ingest_window_is_inclusive_of_its_end() {
        let store = SeriesStore::new();
        let mut ingest = Ingest::new("h", store.clone(), Duration::from_millis(300));
        let mut bytes = encode(&Message::Hello(Hello {
            node_id: 1,
            sample_period_ms: 100,
        }));
        for i in 0..10u64 {
            bytes.extend(encode(&Message::Sample(sample(i, 1_000 + i * 100_000))));
        }
        assert_eq!(ingest.feed(&bytes).unwrap(), IngestStatus::Complete);
        let snap = store.snapshot();
        assert_eq!(snap["h"].samples.len(), 4);
        assert_eq!(snap["h"].connection_state, ConnectionState::Connected);
    }

    #[test]
    fn ingest_marks_lost_on_early_close_and_bad_bytes() {
        let store = SeriesStore::new();
        let mut ingest = Ingest::new("h", store.clone(), Duration::from_secs(1));
        ingest.closed();
        assert_eq!(store.snapshot()["h"].connection_state, ConnectionState::Lost);

        let store = SeriesStore::new();
        let mut ingest = Ingest::new("h", store.clone(), Duration::from_secs(1));
        assert!(ingest.feed(&[0, 0]).is_err());
        assert_eq!(store.snapshot()["h"].connection_state, ConnectionState::Lost);
    }

    #[test]
    fn report_totals_and_warnings() {
        let mut map = SeriesMap::new();
        let mut a = NodeSeries::new("a");
        a.node_id = Some(2);
        a.samples = vec![point(0.0, 1.0, 5.0), point(2.0, 1.0, 5.0)];
        let mut b = NodeSeries::new("b");
        b.node_id = Some(1);
        b.samples = vec![point(0.0, 0.5, 5.0)];
        map.insert("a".into(), a);
        map.insert("b".into(), b);
        map.insert("c".into(), NodeSeries::lost("c", "refused"));
        let r = energy_report(&map);
        assert_eq!(r.nodes.len(), 2);
        assert_eq!(r.nodes[0].node_id, 1);
        assert_eq!(r.node(2).unwrap().energy_j, 10.0);
        assert_eq!(r.node(2).unwrap().mean_power_w, 5.0);
        assert_eq!(r.total_energy_j, 10.0);
        assert_eq!(r.warnings.len(), 2);
    }

    #[test]
    fn empty_series_csv_is_header_only() {
        let mut out = Vec::new();
        write_series_csv(&SeriesMap::new(), &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), format!("{SERIES_CSV_HEADER}\n"));
    }

    #[test]
    fn two_by_two_csv_has_five_lines() {
        let mut map = SeriesMap::new();
        for (addr, id) in [("x", 7u16), ("y", 3)] {
            let mut s = NodeSeries::new(addr);
            s.node_id = Some(id);
            s.samples = vec![point(1.0, 1.0, 5.0), point(0.5, 1.0, 5.0)];
            map.insert(addr.into(), s);
        }
        let mut out = Vec::new();
        write_series_csv(&map, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1], "3,500000,1000000,5000");
        assert_eq!(lines[4], "7,1000000,1000000,5000");
    }
}
