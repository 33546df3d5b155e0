//! Simulated agent connections. Bytes leave the agent at send time and reach
//! the collector after the link delay plus serialization at the link rate,
//! in order. The delay applies in both directions, so the first byte of a
//! connection arrives no earlier than two delays after the dial.

use std::collections::VecDeque;
use std::time::Duration;

use thiserror::Error;

use super::testbed::{Scheduled, SimTestbed, TraceEvent};
use super::SimHandle;
use crate::agent::AgentSession;
use crate::clock::Clock;
use crate::collector::{Ingest, IngestStatus, NodeSeries, SeriesMap, SeriesStore};
use crate::wire::{encode, Message};
use crate::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DialError {
    #[error("{0}: no route to host")]
    NoRoute(String),
    #[error("{0}: connection refused")]
    Refused(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConnEvent {
    Data(Vec<u8>),
    Eof,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConnState {
    Connecting,
    Open,
    Closed,
}

#[derive(Debug)]
pub(crate) struct SimConn {
    node: NodeId,
    epoch: u64,
    state: ConnState,
    session: AgentSession,
    period_us: u64,
    inbox: VecDeque<(u64, ConnEvent)>,
    last_delivery_us: u64,
}

impl SimTestbed {
    fn link_delay_us(&self, node: NodeId) -> u64 {
        self.links.get(node).map(|l| l.delay_us()).unwrap_or(0)
    }

    /// Open a telemetry connection to the agent at `address:port`.
    pub fn dial(&mut self, address: &str, port: u16) -> Result<u64, DialError> {
        let node = self
            .node_by_address(address)
            .ok_or_else(|| DialError::NoRoute(address.to_string()))?;
        if port != self.config.agent_port || !node.agent_reachable() {
            return Err(DialError::Refused(format!("{address}:{port}")));
        }
        let (id, epoch) = (node.id, node.boot_epoch);
        let conn = self.next_conn;
        self.next_conn += 1;
        let period_ms = self.config.sample_period_ms;
        self.conns.insert(
            conn,
            SimConn {
                node: id,
                epoch,
                state: ConnState::Connecting,
                session: AgentSession::new(id.0, period_ms),
                period_us: u64::from(period_ms) * 1_000,
                inbox: VecDeque::new(),
                last_delivery_us: 0,
            },
        );
        self.record(TraceEvent::ConnOpened { node: id, conn });
        let at = self.now_us + self.link_delay_us(id);
        self.schedule(at, Scheduled::Accept { conn });
        Ok(conn)
    }

    fn conn_alive(&self, conn: u64) -> Option<NodeId> {
        let c = self.conns.get(&conn)?;
        let node = self.node(c.node)?;
        (c.state != ConnState::Closed && node.boot_epoch == c.epoch && node.agent_reachable())
            .then_some(c.node)
    }

    pub(super) fn accept(&mut self, conn: u64) {
        let Some(node) = self.conn_alive(conn) else {
            self.hang_up(conn);
            return;
        };
        let Some(c) = self.conns.get_mut(&conn) else { return };
        c.state = ConnState::Open;
        let hello = c.session.hello();
        let period = c.period_us;
        self.send(conn, node, hello);
        self.send_sample(conn, node);
        self.schedule(self.now_us + period, Scheduled::SampleTick { conn });
    }

    pub(super) fn sample_tick(&mut self, conn: u64) {
        let Some(node) = self.conn_alive(conn) else {
            self.hang_up(conn);
            return;
        };
        self.send_sample(conn, node);
        let period = self.conns[&conn].period_us;
        self.schedule(self.now_us + period, Scheduled::SampleTick { conn });
    }

    fn send_sample(&mut self, conn: u64, node: NodeId) {
        let reading = self
            .sim_current(node)
            .map_err(|e| crate::agent::SensorFault(e.to_string()));
        let now = self.now_us;
        let Some(c) = self.conns.get_mut(&conn) else { return };
        let msg = c.session.sample(reading, now);
        self.send(conn, node, msg);
    }

    fn send(&mut self, conn: u64, node: NodeId, msg: Message) {
        let bytes = encode(&msg);
        let link = self.links.get(node).unwrap_or_default();
        let ready = self.now_us + link.delay_us();
        let Some(c) = self.conns.get_mut(&conn) else { return };
        let at = c.last_delivery_us.max(ready) + link.serialization_us(bytes.len());
        c.last_delivery_us = at;
        c.inbox.push_back((at, ConnEvent::Data(bytes)));
    }

    /// Agent side goes away: whatever is in flight still arrives, then EOF.
    fn hang_up(&mut self, conn: u64) {
        let ready = match self.conns.get(&conn) {
            Some(c) if c.state != ConnState::Closed => self.now_us + self.link_delay_us(c.node),
            _ => return,
        };
        let c = self.conns.get_mut(&conn).expect("checked");
        c.state = ConnState::Closed;
        let at = c.last_delivery_us.max(ready);
        c.last_delivery_us = at;
        c.inbox.push_back((at, ConnEvent::Eof));
        let node = c.node;
        self.record(TraceEvent::ConnClosed { node, conn });
    }

    pub(super) fn drop_connections(&mut self, node: NodeId) {
        let ids: Vec<u64> = self
            .conns
            .iter()
            .filter(|(_, c)| c.node == node)
            .map(|(id, _)| *id)
            .collect();
        for id in ids {
            self.hang_up(id);
        }
    }

    /// Everything delivered on `conn` up to now.
    pub fn recv(&mut self, conn: u64) -> Vec<ConnEvent> {
        let now = self.now_us;
        let Some(c) = self.conns.get_mut(&conn) else {
            return vec![ConnEvent::Eof];
        };
        let mut out = Vec::new();
        while c.inbox.front().is_some_and(|(at, _)| *at <= now) {
            out.push(c.inbox.pop_front().expect("peeked").1);
        }
        out
    }

    /// Collector side closes; the connection is forgotten.
    pub fn close(&mut self, conn: u64) {
        if let Some(c) = self.conns.remove(&conn) {
            if c.state != ConnState::Closed {
                self.record(TraceEvent::ConnClosed { node: c.node, conn });
            }
        }
    }

    pub fn open_connections(&self) -> usize {
        self.conns.len()
    }
}

/// Poll step while collecting from the simulator.
pub const COLLECT_STEP_US: u64 = 10_000;
/// Time allowed beyond the window for the closing sample to arrive.
pub const COLLECT_GRACE_US: u64 = 2_000_000;

/// Collect telemetry from `addresses` through the simulator for `duration`
/// of agent time, moving the clock through `handle`.
pub fn collect<'a>(
    handle: &SimHandle,
    addresses: impl IntoIterator<Item = &'a str>,
    port: u16,
    duration: Duration,
) -> SeriesMap {
    let store = SeriesStore::new();
    collect_into(handle, &store, addresses, port, duration);
    store.into_map()
}

/// As [`collect`], writing into a shared store as samples arrive.
pub fn collect_into<'a>(
    handle: &SimHandle,
    store: &SeriesStore,
    addresses: impl IntoIterator<Item = &'a str>,
    port: u16,
    duration: Duration,
) {
    let start = handle.now_us();
    let mut active: Vec<(u64, Ingest)> = Vec::new();
    {
        let mut tb = handle.lock();
        for address in addresses {
            match tb.dial(address, port) {
                Ok(conn) => active.push((conn, Ingest::new(address, store.clone(), duration))),
                Err(e) => store.update(address, |s| *s = NodeSeries::lost(address, e.to_string())),
            }
        }
        if duration.is_zero() {
            for (conn, _) in active.drain(..) {
                tb.close(conn);
            }
        }
    }
    let deadline = start + duration.as_micros() as u64 + COLLECT_GRACE_US;
    while !active.is_empty() {
        {
            let mut tb = handle.lock();
            active.retain_mut(|(conn, ingest)| {
                for ev in tb.recv(*conn) {
                    let finished = match ev {
                        ConnEvent::Data(bytes) => {
                            !matches!(ingest.feed(&bytes), Ok(IngestStatus::Open))
                        }
                        ConnEvent::Eof => {
                            ingest.closed();
                            true
                        }
                    };
                    if finished {
                        tb.close(*conn);
                        return false;
                    }
                }
                true
            });
            if tb.now_us() >= deadline {
                for (conn, ingest) in active.iter_mut() {
                    if ingest.hello().is_none() {
                        ingest.fail("no telemetry before deadline".into());
                    }
                    tb.close(*conn);
                }
                active.clear();
            }
        }
        if active.is_empty() {
            break;
        }
        let now = handle.now_us();
        handle.sleep_until_us((now + COLLECT_STEP_US).min(deadline));
    }
}
