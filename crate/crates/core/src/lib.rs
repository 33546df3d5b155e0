//! Control-plane building blocks for a rack-organised testbed of relay-powered
//! single-board computers.
//!
//! The crate is split along the lines of the physical system:
//!
//! * [`inventory`] parses host-group inventories with bracket ranges.
//! * [`power`] plans and executes staggered relay switching.
//! * [`wire`] is the framed telemetry codec spoken between agents and the collector.
//! * [`agent`] is the per-node current/voltage streamer.
//! * [`collector`] ingests telemetry and integrates energy.
//! * [`orchestrator`] parses and runs minimal playbooks over pluggable transports.
//! * [`linkshape`] holds per-node delay/bandwidth state.
//! * [`sim`] is a deterministic discrete-event model of the whole testbed.

pub mod agent;
pub mod clock;
pub mod collector;
pub mod ids;
pub mod inventory;
pub mod kv;
pub mod linkshape;
pub mod orchestrator;
pub mod power;
pub mod sim;
pub mod wire;

pub use ids::NodeId;
