//! The control plane proper: node state, power plans, playbook runs,
//! collection and experiment runs over a shared simulated testbed.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use netpg_core::clock::Clock;
use netpg_core::collector::{energy_report, ConnectionState, EnergyReport, SeriesMap, SeriesStore};
use netpg_core::inventory::Inventory;
use netpg_core::orchestrator::{
    builtin_files, builtin_playbook, execute_playbook, parse_playbook, DirFiles, ExecOptions, LocalFiles,
    MemFiles, Playbook, RunResult,
};
use netpg_core::power::{plan_switch, BankLocks, BankToken, PlanOptions, RelayState, SwitchRequest};
use netpg_core::sim::{
    self, execute_plan_on_sim, load_scenario, PowerState, SimConfig, SimHandle, SimNode, SimTestbed,
    SimTransportFactory, TimeMode,
};
use netpg_core::NodeId;
use serde::Serialize;
use tokio::sync::{broadcast, watch};

use crate::config::ServiceConfig;
use crate::model::{
    ApiError, CollectRequest, Connection, EventKind, ExperimentRun, ExperimentSpec, Phase, PhaseStatus,
    PlanRecord, PlanStatus, PlanTicket, PlaybookRequest, PowerRequest, StreamEvent, NodeStatus,
};

/// Live samples go out at most this often in wall-clock time.
const MIN_SAMPLE_INTERVAL: Duration = Duration::from_millis(100);
/// How long to wait for a busy bank before giving up, in virtual time.
const BANK_WAIT_US: u64 = 30_000_000;

/// Copy sources: the playbook directory first, then the builtin assets.
struct PlaybookFiles {
    dir: Option<DirFiles>,
    builtin: MemFiles,
}

impl LocalFiles for PlaybookFiles {
    fn read(&self, path: &str) -> Result<Vec<u8>, String> {
        match &self.dir {
            Some(d) => d.read(path).or_else(|e| self.builtin.read(path).map_err(|_| e)),
            None => self.builtin.read(path),
        }
    }
}

#[derive(Default)]
struct State {
    plans: BTreeMap<u64, PlanRecord>,
    runs: BTreeMap<u64, ExperimentRun>,
    busy_groups: BTreeSet<String>,
    jobs: BTreeMap<u64, JoinHandle<()>>,
}

struct Inner {
    sim: SimHandle,
    inventory: Inventory,
    config: ServiceConfig,
    files: PlaybookFiles,
    locks: BankLocks,
    state: Mutex<State>,
    next_id: AtomicU64,
    events: broadcast::Sender<StreamEvent>,
    streams_closed: watch::Sender<bool>,
    stopping: AtomicBool,
}

/// Cheap to clone; clones share everything.
#[derive(Clone)]
pub struct ControlPlane {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for ControlPlane {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlPlane").field("config", &self.inner.config).finish_non_exhaustive()
    }
}

pub fn node_status(tb: &SimTestbed, node: &SimNode) -> NodeStatus {
    let reading = tb.nominal_current(node.id).expect("node from this testbed");
    NodeStatus {
        node_id: node.id.0,
        address: node.address.clone(),
        rack: node.rack,
        role: node.role,
        power: node.power(),
        connection: if node.agent_reachable() {
            Connection::Connected
        } else {
            Connection::Unreachable
        },
        current_ua: reading.current_ua,
        bus_mv: reading.bus_mv,
        link: tb.links().get(node.id).unwrap_or_default().into(),
        timestamp_us: tb.now_us(),
    }
}

impl ControlPlane {
    pub fn new(sim: SimHandle, inventory: Inventory, config: ServiceConfig) -> Self {
        let (events, _) = broadcast::channel(config.stream_buffer);
        let files = PlaybookFiles {
            dir: config.playbook_dir.clone().map(DirFiles::new),
            builtin: builtin_files(),
        };
        Self {
            inner: Arc::new(Inner {
                sim,
                inventory,
                config,
                files,
                locks: BankLocks::new(),
                state: Mutex::new(State::default()),
                next_id: AtomicU64::new(1),
                events,
                streams_closed: watch::channel(false).0,
                stopping: AtomicBool::new(false),
            }),
        }
    }

    /// Build the simulator from the configured scenario, or the default topology.
    pub fn from_config(config: ServiceConfig, inventory: Inventory) -> Result<Self, ApiError> {
        let sim_config = match &config.scenario {
            Some(p) => load_scenario(p).map_err(|e| ApiError::BadRequest(format!("{}: {e}", p.display())))?,
            None => SimConfig::default(),
        };
        let sim = SimHandle::from_config(sim_config).map_err(|e| ApiError::BadRequest(e.to_string()))?;
        Ok(Self::new(sim, inventory, config))
    }

    pub fn sim(&self) -> &SimHandle {
        &self.inner.sim
    }

    pub fn inventory(&self) -> &Inventory {
        &self.inner.inventory
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub fn subscribe(&self) -> broadcast::Receiver<StreamEvent> {
        self.inner.events.subscribe()
    }

    /// Flips to `true` once stream subscribers should hang up.
    pub fn streams_closed(&self) -> watch::Receiver<bool> {
        self.inner.streams_closed.subscribe()
    }

    pub fn close_streams(&self) {
        self.inner.streams_closed.send_replace(true);
    }

    fn state(&self) -> MutexGuard<'_, State> {
        self.inner.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn next_id(&self) -> u64 {
        self.inner.next_id.fetch_add(1, Ordering::SeqCst)
    }

    fn emit(&self, kind: EventKind, node_id: Option<u16>, timestamp_us: u64, payload: impl Serialize) {
        let payload = serde_json::to_value(payload).expect("event payload serializes");
        let _ = self.inner.events.send(StreamEvent {
            kind,
            node_id,
            timestamp_us,
            payload,
        });
    }

    fn check_running(&self) -> Result<(), ApiError> {
        if self.inner.stopping.load(Ordering::SeqCst) {
            return Err(ApiError::Unavailable("service is shutting down".into()));
        }
        Ok(())
    }

    /// Addresses of `group` with the simulated node behind each, if any.
    fn group_members(&self, group: &str) -> Result<Vec<(String, Option<NodeId>)>, ApiError> {
        let g = self
            .inner
            .inventory
            .resolve_group(group)
            .map_err(|e| ApiError::NotFound(e.to_string()))?;
        let tb = self.inner.sim.lock();
        Ok(g.addresses()
            .map(|a| (a.to_string(), tb.node_by_address(a).map(|n| n.id)))
            .collect())
    }

    fn group_ids(&self, group: &str) -> Result<Vec<NodeId>, ApiError> {
        Ok(self.group_members(group)?.into_iter().filter_map(|(_, id)| id).collect())
    }

    pub fn nodes(&self, group: Option<&str>) -> Result<Vec<NodeStatus>, ApiError> {
        let ids = group.map(|g| self.group_ids(g)).transpose()?;
        let tb = self.inner.sim.lock();
        Ok(match ids {
            None => tb.nodes().iter().map(|n| node_status(&tb, n)).collect(),
            Some(ids) => ids
                .into_iter()
                .filter_map(|id| tb.node(id).map(|n| node_status(&tb, n)))
                .collect(),
        })
    }

    pub fn node(&self, id: u16) -> Result<NodeStatus, ApiError> {
        let tb = self.inner.sim.lock();
        tb.node(NodeId(id))
            .map(|n| node_status(&tb, n))
            .ok_or_else(|| ApiError::NotFound(format!("unknown node {id}")))
    }

    fn switch_requests(&self, req: &PowerRequest, target: RelayState) -> Result<Vec<SwitchRequest>, ApiError> {
        let selectors = [req.group.is_some(), req.nodes.is_some(), req.rack.is_some()];
        if selectors.iter().filter(|s| **s).count() != 1 {
            return Err(ApiError::BadRequest(
                "give exactly one of `group`, `nodes` or `rack` (optionally with `relay`)".into(),
            ));
        }
        if req.relay.is_some() && req.rack.is_none() {
            return Err(ApiError::BadRequest("`relay` needs `rack`".into()));
        }
        let ids = match (&req.group, &req.nodes) {
            (Some(g), _) => self.group_ids(g)?,
            (_, Some(nodes)) => nodes.iter().map(|&n| NodeId(n)).collect(),
            _ => Vec::new(),
        };
        let tb = self.inner.sim.lock();
        let requests = if let Some(rack) = req.rack {
            let bank = tb
                .rack(rack)
                .map_err(|e| ApiError::NotFound(e.to_string()))?
                .bank
                .clone();
            let relays: Vec<u8> = match req.relay {
                Some(r) if bank.relay(r).is_none() => {
                    return Err(ApiError::NotFound(format!("rack {rack} has no relay {r}")))
                }
                Some(r) => vec![r],
                None => bank.relays().iter().map(|r| r.relay_id).collect(),
            };
            relays
                .into_iter()
                .map(|relay_id| SwitchRequest {
                    bank: bank.control_node_id,
                    relay_id,
                    target,
                })
                .collect()
        } else {
            if let Some(missing) = ids.iter().find(|id| tb.node(**id).is_none()) {
                return Err(ApiError::NotFound(format!("unknown node {missing}")));
            }
            tb.requests_for(&ids, target)
        };
        if requests.is_empty() {
            return Err(ApiError::BadRequest("no relay powers the selected nodes".into()));
        }
        Ok(requests)
    }

    fn acquire_banks(&self, requests: &[SwitchRequest]) -> Result<Vec<BankToken>, ApiError> {
        let banks: BTreeSet<NodeId> = requests.iter().map(|r| r.bank).collect();
        banks
            .into_iter()
            .map(|b| self.inner.locks.try_acquire(b))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ApiError::Conflict(e.to_string()))
    }

    /// Plan the switch and start executing it in the background.
    pub fn power(&self, req: &PowerRequest) -> Result<PlanTicket, ApiError> {
        self.check_running()?;
        let target = req
            .state
            .ok_or_else(|| ApiError::BadRequest("`state` is required".into()))?;
        let requests = self.switch_requests(req, target)?;
        let tokens = self.acquire_banks(&requests)?;
        let plan = {
            let tb = self.inner.sim.lock();
            plan_switch(&tb.banks(), &requests, &PlanOptions::with_stagger(self.inner.config.stagger_ms))
                .map_err(|e| ApiError::BadRequest(e.to_string()))?
        };
        let plan_id = self.next_id();
        let record = PlanRecord {
            plan_id,
            status: PlanStatus::Running,
            transitions: plan.len(),
            span_ms: plan.span_ms(),
            report: None,
        };
        let ticket = PlanTicket {
            plan_id,
            transitions: record.transitions,
            span_ms: record.span_ms,
        };
        self.emit(EventKind::Plan, None, self.inner.sim.now_us(), &record);
        self.state().plans.insert(plan_id, record);

        let stagger_us = self.inner.config.stagger_ms * 1_000;
        self.spawn_job(plan_id, "power", move |cp| {
            let report = execute_plan_on_sim(&cp.inner.sim, &plan);
            if !plan.is_empty() {
                let sim = &cp.inner.sim;
                sim.sleep_until_us(sim.now_us() + stagger_us);
            }
            drop(tokens);
            let now = cp.inner.sim.now_us();
            let mut st = cp.state();
            let rec = st.plans.get_mut(&plan_id).expect("plan recorded at start");
            rec.status = if report.all_done() {
                PlanStatus::Done
            } else {
                PlanStatus::Failed
            };
            rec.report = Some(report);
            cp.emit(EventKind::Plan, None, now, &*rec);
        });
        Ok(ticket)
    }

    pub fn plan(&self, plan_id: u64) -> Result<PlanRecord, ApiError> {
        self.state()
            .plans
            .get(&plan_id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown plan {plan_id}")))
    }

    fn spawn_job(&self, id: u64, what: &str, f: impl FnOnce(ControlPlane) + Send + 'static) {
        let cp = self.clone();
        let handle = std::thread::Builder::new()
            .name(format!("{what}-{id}"))
            .spawn(move || f(cp))
            .expect("spawn job thread");
        self.state().jobs.insert(id, handle);
    }

    /// Block until the plan or experiment `id` has finished.
    pub fn wait(&self, id: u64) {
        let job = self.state().jobs.remove(&id);
        if let Some(h) = job {
            let _ = h.join();
        }
    }

    /// Wait on the simulator clock for `done`, checking every `step_us`.
    pub fn wait_until(&self, limit_us: u64, step_us: u64, mut done: impl FnMut(&SimTestbed) -> bool) -> bool {
        let sim = &self.inner.sim;
        let end = sim.now_us() + limit_us;
        loop {
            let now = {
                let tb = sim.lock();
                if done(&tb) {
                    return true;
                }
                tb.now_us()
            };
            if now >= end {
                return false;
            }
            sim.sleep_until_us((now + step_us).min(end));
        }
    }

    /// Wait until every node of `ids` is in `state`.
    pub fn wait_for_power(&self, ids: &[NodeId], state: PowerState, limit_us: u64) -> bool {
        let step = self.inner.sim.lock().config().sample_period_ms as u64 * 1_000;
        self.wait_until(limit_us, step, |tb| {
            ids.iter().all(|id| tb.node(*id).is_some_and(|n| n.power() == state))
        })
    }

    /// Node ids of `group` known to the simulator.
    pub fn resolve_nodes(&self, group: &str) -> Result<Vec<NodeId>, ApiError> {
        self.group_ids(group)
    }

    pub fn load_playbook(&self, name: &str) -> Result<Playbook, ApiError> {
        let source = if let Some(src) = builtin_playbook(name) {
            src.to_string()
        } else if name.contains('\n') {
            name.to_string()
        } else {
            let file = self.inner.config.playbook_dir.as_ref().and_then(|dir| {
                [name.to_string(), format!("{name}.yml"), format!("{name}.yaml")]
                    .into_iter()
                    .map(|f| dir.join(f))
                    .find(|p| p.is_file())
            });
            match file {
                Some(p) => std::fs::read_to_string(&p)
                    .map_err(|e| ApiError::Internal(format!("{}: {e}", p.display())))?,
                None => return Err(ApiError::NotFound(format!("unknown playbook {name:?}"))),
            }
        };
        parse_playbook(&source).map_err(|e| ApiError::BadRequest(format!("playbook {name:?}: {e}")))
    }

    fn execute(&self, pb: &Playbook, extra_vars: BTreeMap<String, String>, fork_limit: usize) -> Result<RunResult, ApiError> {
        if fork_limit == 0 {
            return Err(ApiError::BadRequest("fork_limit must be at least 1".into()));
        }
        self.inner
            .inventory
            .resolve_group(&pb.hosts)
            .map_err(|e| ApiError::NotFound(e.to_string()))?;
        let opts = ExecOptions {
            extra_vars,
            fork_limit,
        };
        execute_playbook(
            pb,
            &self.inner.inventory,
            &opts,
            &SimTransportFactory::new(self.inner.sim.clone()),
            &self.inner.files,
        )
        .map_err(|e| ApiError::Internal(e.to_string()))
    }

    /// Run a playbook to completion. Blocks.
    pub fn run_playbook(&self, req: &PlaybookRequest) -> Result<RunResult, ApiError> {
        self.check_running()?;
        let mut pb = self.load_playbook(&req.playbook)?;
        if let Some(h) = &req.hosts {
            pb.hosts = h.clone();
        }
        self.execute(&pb, req.extra_vars.clone(), req.fork_limit.unwrap_or(self.inner.config.fork_limit))
    }

    /// Collect telemetry from a group for `duration_s` of agent time. Blocks.
    pub fn collect(&self, req: &CollectRequest) -> Result<SeriesMap, ApiError> {
        self.check_running()?;
        if !(req.duration_s.is_finite() && req.duration_s >= 0.0) {
            return Err(ApiError::BadRequest("duration_s must be a non-negative number".into()));
        }
        let members = self.group_members(&req.group)?;
        Ok(self.collect_members(&members, Duration::from_secs_f64(req.duration_s)))
    }

    fn collect_members(&self, members: &[(String, Option<NodeId>)], duration: Duration) -> SeriesMap {
        let port = self.inner.sim.lock().config().agent_port;
        let store = SeriesStore::new();
        sim::collect_into(
            &self.inner.sim,
            &store,
            members.iter().map(|(a, _)| a.as_str()),
            port,
            duration,
        );
        store.into_map()
    }

    pub fn start_experiment(&self, spec: ExperimentSpec) -> Result<u64, ApiError> {
        self.check_running()?;
        spec.validate()?;
        self.group_members(&spec.group)?;
        if let Some(w) = &spec.workload_playbook {
            self.load_playbook(w)?;
        }
        let run_id = {
            let mut st = self.state();
            if !st.busy_groups.insert(spec.group.clone()) {
                return Err(ApiError::Conflict(format!(
                    "an experiment is already running on {}",
                    spec.group
                )));
            }
            let run_id = self.next_id();
            st.runs.insert(run_id, ExperimentRun::new(run_id, spec));
            run_id
        };
        self.spawn_job(run_id, "experiment", move |cp| cp.run_experiment(run_id));
        Ok(run_id)
    }

    pub fn experiment(&self, run_id: u64) -> Result<ExperimentRun, ApiError> {
        self.state()
            .runs
            .get(&run_id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown experiment {run_id}")))
    }

    fn update_run(&self, run_id: u64, f: impl FnOnce(&mut ExperimentRun)) {
        let mut st = self.state();
        if let Some(run) = st.runs.get_mut(&run_id) {
            f(run);
        }
    }

    fn set_phase(&self, run_id: u64, phase: Phase, status: PhaseStatus, detail: Option<String>) {
        let now = self.inner.sim.now_us();
        let mut st = self.state();
        let Some(run) = st.runs.get_mut(&run_id) else { return };
        let rec = run.phase_mut(phase);
        rec.status = status;
        match status {
            PhaseStatus::Running => rec.started_us = Some(now),
            PhaseStatus::Pending => {}
            _ => rec.finished_us = Some(now),
        }
        if detail.is_some() {
            rec.detail = detail;
        }
        self.emit(
            EventKind::Experiment,
            None,
            now,
            serde_json::json!({ "run_id": run_id, "phase": rec }),
        );
    }

    fn run_phase(&self, run_id: u64, phase: Phase, f: impl FnOnce() -> Result<Option<String>, String>) -> bool {
        self.set_phase(run_id, phase, PhaseStatus::Running, None);
        let outcome = if phase != Phase::Reset && self.inner.stopping.load(Ordering::SeqCst) {
            Err("service is shutting down".to_string())
        } else {
            f()
        };
        match outcome {
            Ok(detail) => {
                self.set_phase(run_id, phase, PhaseStatus::Ok, detail);
                true
            }
            Err(detail) => {
                tracing::warn!(run_id, ?phase, %detail, "phase failed");
                self.set_phase(run_id, phase, PhaseStatus::Failed, Some(detail));
                false
            }
        }
    }

    fn run_experiment(&self, run_id: u64) {
        let spec = self.experiment(run_id).expect("run recorded before start").spec;
        let members = self.group_members(&spec.group).unwrap_or_default();
        let ids: Vec<NodeId> = members.iter().filter_map(|(_, id)| *id).collect();

        let mut ok = true;
        for phase in [Phase::ApplyLinks, Phase::PowerOn, Phase::Workload, Phase::Collect] {
            if !ok {
                self.set_phase(run_id, phase, PhaseStatus::Skipped, None);
                continue;
            }
            ok = self.run_phase(run_id, phase, || match phase {
                Phase::ApplyLinks => self.apply_links(&members, &spec),
                Phase::PowerOn => self.power_on(&ids),
                Phase::Workload => self.workload(&spec),
                Phase::Collect => self.collect_phase(run_id, &members, spec.duration_s),
                Phase::Reset => unreachable!(),
            });
        }
        self.run_phase(run_id, Phase::Reset, || self.reset_group(&spec.group, &ids));

        self.update_run(run_id, |r| r.finished = true);
        self.state().busy_groups.remove(&spec.group);
        let run = self.experiment(run_id).expect("run exists");
        self.emit(
            EventKind::Experiment,
            None,
            self.inner.sim.now_us(),
            serde_json::json!({ "run_id": run_id, "finished": true, "failed": run.failed() }),
        );
    }

    fn apply_links(&self, members: &[(String, Option<NodeId>)], spec: &ExperimentSpec) -> Result<Option<String>, String> {
        let unknown: Vec<&str> = members
            .iter()
            .filter(|(_, id)| id.is_none())
            .map(|(a, _)| a.as_str())
            .collect();
        if !unknown.is_empty() {
            return Err(format!("no such node: {}", unknown.join(", ")));
        }
        let cfg = spec.link();
        let mut tb = self.inner.sim.lock();
        for id in members.iter().filter_map(|(_, id)| *id) {
            tb.apply_link(id, cfg).map_err(|e| e.to_string())?;
        }
        Ok(Some(cfg.to_string()))
    }

    fn power_on(&self, ids: &[NodeId]) -> Result<Option<String>, String> {
        let sim = &self.inner.sim;
        let (requests, boot_ms) = {
            let tb = sim.lock();
            (tb.requests_for(ids, RelayState::On), tb.config().boot_ms)
        };
        let stagger_us = self.inner.config.stagger_ms * 1_000;
        let mut tokens = None;
        self.wait_until(BANK_WAIT_US, stagger_us, |_| {
            tokens = self.acquire_banks(&requests).ok();
            tokens.is_some()
        });
        let Some(tokens) = tokens else {
            return Err("relay banks stayed busy".into());
        };
        let plan = {
            let tb = sim.lock();
            plan_switch(&tb.banks(), &requests, &PlanOptions::with_stagger(self.inner.config.stagger_ms))
                .map_err(|e| e.to_string())?
        };
        let report = execute_plan_on_sim(sim, &plan);
        let cool_until = sim.now_us() + if plan.is_empty() { 0 } else { stagger_us };
        if !report.all_done() {
            return Err(format!("relay switching failed: {:?}", report.entries));
        }
        let booted = self.wait_for_power(ids, PowerState::On, boot_ms * 1_000 + 2 * stagger_us);
        sim.sleep_until_us(cool_until);
        drop(tokens);
        if !booted {
            let tb = sim.lock();
            let down: Vec<String> = ids
                .iter()
                .filter(|id| tb.node(**id).is_some_and(|n| n.power() != PowerState::On))
                .map(|id| id.to_string())
                .collect();
            return Err(format!("nodes not on after boot: {}", down.join(", ")));
        }
        Ok(Some(format!("{} relay transitions", plan.len())))
    }

    fn workload(&self, spec: &ExperimentSpec) -> Result<Option<String>, String> {
        let Some(name) = &spec.workload_playbook else {
            return Ok(Some("idle".into()));
        };
        let mut pb = self.load_playbook(name).map_err(|e| e.to_string())?;
        pb.hosts = spec.group.clone();
        let res = self
            .execute(&pb, spec.extra_vars.clone(), self.inner.config.fork_limit)
            .map_err(|e| e.to_string())?;
        if res.succeeded() {
            Ok(Some(format!("{} tasks ok", res.results.len())))
        } else {
            let first = res
                .results
                .iter()
                .find(|r| r.status == netpg_core::orchestrator::TaskStatus::Failed)
                .map(|r| format!("{} `{}`: {}", r.host, r.task_name, r.stderr.trim()))
                .unwrap_or_default();
            Err(format!("failed on {}; first: {first}", res.failed_hosts().join(", ")))
        }
    }

    fn collect_phase(&self, run_id: u64, members: &[(String, Option<NodeId>)], duration_s: f64) -> Result<Option<String>, String> {
        if duration_s == 0.0 {
            let warning = "collection duration is 0 s, nothing was sampled".to_string();
            let report = EnergyReport::from_nodes(Vec::new(), vec![warning.clone()]);
            self.update_run(run_id, |r| r.energy_report = Some(report));
            return Ok(Some(warning));
        }
        let series = self.collect_members(members, Duration::from_secs_f64(duration_s));
        let report = energy_report(&series);
        let total = report.total_energy_j;
        self.update_run(run_id, |r| r.energy_report = Some(report));
        let lost: Vec<&str> = series
            .values()
            .filter(|s| s.connection_state != ConnectionState::Connected)
            .map(|s| s.address.as_str())
            .collect();
        if lost.is_empty() {
            Ok(Some(format!("{} nodes, {total:.3} J", series.len())))
        } else {
            Err(format!("telemetry lost from {}", lost.join(", ")))
        }
    }

    fn reset_group(&self, group: &str, ids: &[NodeId]) -> Result<Option<String>, String> {
        let mut notes = Vec::new();
        match self.load_playbook("experiment_reset") {
            Ok(mut pb) => {
                pb.hosts = group.to_string();
                match self.execute(&pb, BTreeMap::new(), self.inner.config.fork_limit) {
                    Ok(res) if !res.succeeded() => {
                        notes.push(format!("reset playbook failed on {}", res.failed_hosts().join(", ")))
                    }
                    Ok(_) => {}
                    Err(e) => notes.push(e.to_string()),
                }
            }
            Err(e) => notes.push(e.to_string()),
        }
        let mut tb = self.inner.sim.lock();
        for id in ids {
            tb.reset_link(*id).map_err(|e| e.to_string())?;
        }
        let dirty: Vec<String> = ids
            .iter()
            .filter_map(|id| tb.node(*id))
            .filter(|n| !n.units().is_empty() || !n.enabled_services().is_empty())
            .map(|n| n.address.clone())
            .collect();
        if !dirty.is_empty() {
            notes.push(format!("workload services remain on {}", dirty.join(", ")));
            return Err(notes.join("; "));
        }
        Ok((!notes.is_empty()).then(|| notes.join("; ")))
    }

    /// Move the simulator in wall-clock time and publish node state on the stream.
    pub fn start_pacer(&self) -> Pacer {
        self.inner.sim.set_mode(TimeMode::Paced);
        let stop = Arc::new(AtomicBool::new(false));
        let cp = self.clone();
        let flag = stop.clone();
        let thread = std::thread::Builder::new()
            .name("pacer".into())
            .spawn(move || cp.pace(&flag))
            .expect("spawn pacer");
        Pacer {
            stop,
            thread: Some(thread),
        }
    }

    fn pace(&self, stop: &AtomicBool) {
        let cfg = &self.inner.config;
        let tick = Duration::from_millis(cfg.tick_ms);
        let dt_us = ((cfg.tick_ms * 1_000) as f64 * cfg.speed).max(1.0) as u64;
        let mut monitor = Monitor::default();
        let mut next = Instant::now() + tick;
        while !stop.load(Ordering::SeqCst) {
            let now = Instant::now();
            if next > now {
                std::thread::sleep(next - now);
            }
            next += tick;
            self.inner.sim.advance(dt_us);
            monitor.poll(self);
        }
    }

    /// Refuse new work, let running experiments skip to Reset, and wait for
    /// every background job. Stops `pacer` and finishes remaining waits in
    /// virtual time.
    pub fn shutdown(&self, pacer: Option<Pacer>) {
        self.inner.stopping.store(true, Ordering::SeqCst);
        self.close_streams();
        if let Some(p) = pacer {
            p.stop();
        }
        self.inner.sim.set_mode(TimeMode::Driven);
        loop {
            let jobs = std::mem::take(&mut self.state().jobs);
            if jobs.is_empty() {
                break;
            }
            for (_, h) in jobs {
                let _ = h.join();
            }
        }
    }
}

/// Running pacer thread. Dropping it stops the thread.
pub struct Pacer {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Pacer {
    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Pacer {
    fn drop(&mut self) {
        self.halt();
    }
}

#[derive(Default)]
struct Monitor {
    last: Vec<Option<NodeStatus>>,
    next_sample_us: u64,
    last_samples: Option<Instant>,
}

impl Monitor {
    /// Status events for nodes whose state changed, and one sample per
    /// powered node each sample period.
    fn poll(&mut self, cp: &ControlPlane) {
        let (statuses, period_us) = {
            let tb = cp.inner.sim.lock();
            let period = u64::from(tb.config().sample_period_ms) * 1_000;
            (tb.nodes().iter().map(|n| node_status(&tb, n)).collect::<Vec<_>>(), period)
        };
        if self.last.len() != statuses.len() {
            self.last = vec![None; statuses.len()];
        }
        let now = statuses.first().map_or(0, |s| s.timestamp_us);
        let sample_due = now >= self.next_sample_us
            && self.last_samples.is_none_or(|t| t.elapsed() >= MIN_SAMPLE_INTERVAL);
        if sample_due {
            self.next_sample_us = now + period_us;
            self.last_samples = Some(Instant::now());
        }
        for (slot, st) in self.last.iter_mut().zip(statuses) {
            if slot.as_ref().is_none_or(|prev| !prev.same_state(&st)) {
                cp.emit(EventKind::NodeStatus, Some(st.node_id), st.timestamp_us, &st);
            }
            if sample_due && st.power != PowerState::Off {
                cp.emit(
                    EventKind::Sample,
                    Some(st.node_id),
                    st.timestamp_us,
                    serde_json::json!({ "current_ua": st.current_ua, "bus_mv": st.bus_mv }),
                );
            }
            *slot = Some(st);
        }
    }
}
