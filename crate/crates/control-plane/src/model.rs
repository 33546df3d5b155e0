//! Request, response and stream types shared by the HTTP API and the CLI.

use std::collections::BTreeMap;

use netpg_core::collector::EnergyReport;
use netpg_core::kv::KvFile;
use netpg_core::linkshape::{LinkConfig, Rate};
use netpg_core::power::{ExecutionReport, RelayState};
use netpg_core::sim::{NodeRole, PowerState};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ApiError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unavailable(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> u16 {
        match self {
            ApiError::NotFound(_) => 404,
            ApiError::BadRequest(_) => 400,
            ApiError::Conflict(_) => 409,
            ApiError::Unavailable(_) => 503,
            ApiError::Internal(_) => 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connection {
    Connected,
    Unreachable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkView {
    pub delay_ms: u32,
    /// `None` is unlimited.
    pub rate_kbit: Option<u32>,
}

impl From<LinkConfig> for LinkView {
    fn from(c: LinkConfig) -> Self {
        Self {
            delay_ms: c.delay_ms,
            rate_kbit: match c.rate {
                Rate::Unlimited => None,
                Rate::Kbit(k) => Some(k.get()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeStatus {
    pub node_id: u16,
    pub address: String,
    pub rack: u8,
    pub role: NodeRole,
    pub power: PowerState,
    pub connection: Connection,
    pub current_ua: i32,
    pub bus_mv: u16,
    pub link: LinkView,
    /// Virtual time the reading was taken.
    pub timestamp_us: u64,
}

impl NodeStatus {
    /// Fields whose change is announced on the stream.
    pub fn same_state(&self, other: &NodeStatus) -> bool {
        self.power == other.power && self.connection == other.connection && self.link == other.link
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    NodeStatus,
    Sample,
    Plan,
    Experiment,
}

/// One line on `/stream`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub kind: EventKind,
    pub node_id: Option<u16>,
    pub timestamp_us: u64,
    pub payload: serde_json::Value,
}

impl StreamEvent {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("stream events serialize");
        s.push('\n');
        s
    }
}

/// Target is exactly one of a group, a node list, or one relay.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<Vec<u16>>,
    /// Rack index from 0, with `relay`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rack: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relay: Option<u8>,
    pub state: Option<RelayState>,
}

impl PowerRequest {
    pub fn group(group: &str, state: RelayState) -> Self {
        Self {
            group: Some(group.to_string()),
            state: Some(state),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanTicket {
    pub plan_id: u64,
    pub transitions: usize,
    pub span_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanStatus {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlanRecord {
    pub plan_id: u64,
    pub status: PlanStatus,
    pub transitions: usize,
    pub span_ms: u64,
    pub report: Option<ExecutionReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaybookRequest {
    /// Builtin name, file under the playbook directory, or inline source.
    pub playbook: String,
    #[serde(default)]
    pub extra_vars: BTreeMap<String, String>,
    /// Overrides the play's `hosts`.
    #[serde(default)]
    pub hosts: Option<String>,
    #[serde(default)]
    pub fork_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectRequest {
    pub group: String,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ApplyLinks,
    PowerOn,
    Workload,
    Collect,
    Reset,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::ApplyLinks,
        Phase::PowerOn,
        Phase::Workload,
        Phase::Collect,
        Phase::Reset,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseStatus {
    Pending,
    Running,
    Ok,
    Failed,
    /// Not run because an earlier phase failed.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub status: PhaseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub started_us: Option<u64>,
    pub finished_us: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub group: String,
    #[serde(default)]
    pub delay_ms: u32,
    #[serde(default)]
    pub rate_kbit: Option<u32>,
    /// As for [`PlaybookRequest::playbook`]; absent means the nodes idle.
    #[serde(default)]
    pub workload_playbook: Option<String>,
    #[serde(default)]
    pub extra_vars: BTreeMap<String, String>,
    pub duration_s: f64,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), ApiError> {
        if !(self.duration_s.is_finite() && self.duration_s >= 0.0) {
            return Err(ApiError::BadRequest(format!(
                "duration_s must be a non-negative number, got {}",
                self.duration_s
            )));
        }
        if self.rate_kbit == Some(0) {
            return Err(ApiError::BadRequest("rate_kbit must be positive".into()));
        }
        Ok(())
    }

    pub fn link(&self) -> LinkConfig {
        LinkConfig::new(self.delay_ms, self.rate_kbit)
    }

    /// Spec file: `group`, `delay_ms`, `rate_kbit` (number or `unlimited`),
    /// `workload_playbook`, `duration_s`, and `var.NAME` extra variables.
    pub fn from_kv(kv: &KvFile) -> Result<Self, ApiError> {
        let bad = |e: netpg_core::kv::KvError| ApiError::BadRequest(e.to_string());
        let mut extra_vars = BTreeMap::new();
        for (k, v) in kv.iter() {
            match k.strip_prefix("var.") {
                Some(name) => {
                    extra_vars.insert(name.to_string(), v.to_string());
                }
                None if ["group", "delay_ms", "rate_kbit", "workload_playbook", "duration_s"].contains(&k) => {}
                None => return Err(ApiError::BadRequest(format!("unknown key `{k}`"))),
            }
        }
        let group = kv
            .get("group")
            .ok_or_else(|| ApiError::BadRequest("`group` is required".into()))?
            .to_string();
        let duration_s = kv
            .parsed("duration_s")
            .map_err(bad)?
            .ok_or_else(|| ApiError::BadRequest("`duration_s` is required".into()))?;
        let rate_kbit = match kv.parsed::<Rate>("rate_kbit").map_err(bad)? {
            None | Some(Rate::Unlimited) => None,
            Some(Rate::Kbit(k)) => Some(k.get()),
        };
        let spec = Self {
            group,
            delay_ms: kv.parsed("delay_ms").map_err(bad)?.unwrap_or(0),
            rate_kbit,
            workload_playbook: kv.get("workload_playbook").map(str::to_string),
            extra_vars,
            duration_s,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRun {
    pub run_id: u64,
    pub spec: ExperimentSpec,
    pub phases: Vec<PhaseRecord>,
    pub energy_report: Option<EnergyReport>,
    pub finished: bool,
}

impl ExperimentRun {
    pub fn new(run_id: u64, spec: ExperimentSpec) -> Self {
        Self {
            run_id,
            spec,
            phases: Phase::ALL
                .iter()
                .map(|&phase| PhaseRecord {
                    phase,
                    status: PhaseStatus::Pending,
                    detail: None,
                    started_us: None,
                    finished_us: None,
                })
                .collect(),
            energy_report: None,
            finished: false,
        }
    }

    pub fn phase(&self, phase: Phase) -> &PhaseRecord {
        &self.phases[phase as usize]
    }

    pub fn phase_mut(&mut self, phase: Phase) -> &mut PhaseRecord {
        &mut self.phases[phase as usize]
    }

    pub fn failed(&self) -> bool {
        self.phases.iter().any(|p| p.status == PhaseStatus::Failed)
    }
}
