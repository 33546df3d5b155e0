//! The CLI and the HTTP API drive the same operations. Each case runs once
//! through `cli::run --json` and once through the router, each on its own
//! fresh simulator built from the same scenario, and compares results.

mod common;

use std::path::PathBuf;
use std::time::Duration;

use axum::http::StatusCode;
use common::{call, eventually};
use netpg_control::http::router;
use netpg_control::{cli, ControlPlane, ServiceConfig};
use netpg_core::inventory::parse_inventory;
use netpg_core::sim::{parse_scenario, PowerState, SimConfig, SimHandle};
use serde_json::{json, Value};
use tempfile::TempDir;

struct Fixture {
    dir: TempDir,
    inv: PathBuf,
    scenario: PathBuf,
    sim: SimConfig,
}

impl Fixture {
    fn new(scenario_text: &str) -> Self {
        let sim = parse_scenario(scenario_text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let inv = dir.path().join("hosts");
        let scenario = dir.path().join("scenario.conf");
        std::fs::write(&inv, SimHandle::from_config(sim.clone()).unwrap().lock().inventory_text()).unwrap();
        std::fs::write(&scenario, scenario_text).unwrap();
        Fixture { dir, inv, scenario, sim }
    }

    fn cli(&self, args: &[&str]) -> (i32, Value) {
        let mut argv = vec!["netpg", "--json", "-i", self.inv.to_str().unwrap(), "--scenario", self.scenario.to_str().unwrap()];
        argv.extend_from_slice(args);
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = cli::run(argv, &mut out, &mut err);
        let v = serde_json::from_slice(&out).unwrap_or_else(|_| panic!("{}", String::from_utf8_lossy(&err)));
        (code, v)
    }

    fn plane(&self) -> ControlPlane {
        let h = SimHandle::from_config(self.sim.clone()).unwrap();
        let inv = parse_inventory(&std::fs::read_to_string(&self.inv).unwrap()).unwrap();
        ControlPlane::new(h, inv, ServiceConfig::default())
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn status_matches_node_listing() {
    let fx = Fixture::new("");
    let app = router(fx.plane());
    let (code, cli) = fx.cli(&["status", "--group", "odroids-control"]);
    let (status, api) = call(&app, "GET", "/nodes?group=odroids-control", None).await;
    assert_eq!((code, status), (0, StatusCode::OK));
    assert_eq!(cli, api);
    assert_eq!(api.as_array().unwrap().len(), 8);
}

#[tokio::test(flavor = "multi_thread")]
async fn playbook_runs_agree() {
    let fx = Fixture::new("");
    let app = router(fx.plane());
    let (code, cli) = fx.cli(&["run", "odroids_power", "-e", "power=on"]);
    let (status, api) = call(
        &app,
        "POST",
        "/playbooks/run",
        Some(json!({ "playbook": "odroids_power", "extra_vars": { "power": "on" } })),
    )
    .await;
    assert_eq!((code, status), (0, StatusCode::OK));
    assert_eq!(cli, api);
}

#[tokio::test(flavor = "multi_thread")]
async fn power_plans_agree() {
    let fx = Fixture::new("");
    let cp = fx.plane();
    let app = router(cp.clone());
    let (code, cli) = fx.cli(&["power", "on", "--group", "odroids-testgroup"]);
    assert_eq!(code, 0);

    let (status, ticket) = call(&app, "POST", "/power", Some(json!({ "group": "odroids-testgroup", "state": "on" }))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(ticket["transitions"], cli["plan"]["transitions"]);
    assert_eq!(ticket["span_ms"], cli["plan"]["span_ms"]);
    let uri = format!("/power/{}", ticket["plan_id"]);
    let plan = eventually(Duration::from_secs(10), async || {
        let (_, p) = call(&app, "GET", &uri, None).await;
        (p["status"] != "running").then_some(p)
    })
    .await;
    assert_eq!(plan["status"], cli["plan"]["status"]);
    assert_eq!(plan["report"], cli["plan"]["report"]);

    let ids = cp.resolve_nodes("odroids-testgroup").unwrap();
    assert!(cp.wait_for_power(&ids, PowerState::On, 6_000_000));
    let (_, nodes) = call(&app, "GET", "/nodes?group=odroids-testgroup", None).await;
    let power = |v: &Value| v.as_array().unwrap().iter().map(|n| n["power"].clone()).collect::<Vec<_>>();
    assert_eq!(power(&nodes), power(&cli["nodes"]));
}

#[tokio::test(flavor = "multi_thread")]
async fn collect_reports_agree() {
    let fx = Fixture::new("initial_power=on\n");
    let app = router(fx.plane());
    let csv = fx.dir.path().join("series.csv");
    let (code, cli) = fx.cli(&["collect", "--group", "odroids-testgroup", "--duration-s", "3", "--out", csv.to_str().unwrap()]);
    let (status, api) = call(&app, "POST", "/collect", Some(json!({ "group": "odroids-testgroup", "duration_s": 3.0 }))).await;
    assert_eq!((code, status), (0, StatusCode::OK));
    assert_eq!(cli, api["report"]);
}

#[tokio::test(flavor = "multi_thread")]
async fn experiment_runs_agree() {
    let fx = Fixture::new("");
    let app = router(fx.plane());
    let spec = fx.dir.path().join("exp.conf");
    std::fs::write(&spec, "group=odroids-testgroup\ndelay_ms=40\nrate_kbit=unlimited\nduration_s=5\n").unwrap();
    let (code, cli) = fx.cli(&["experiment", spec.to_str().unwrap()]);
    assert_eq!(code, 0);

    let (status, started) = call(
        &app,
        "POST",
        "/experiments",
        Some(json!({ "group": "odroids-testgroup", "delay_ms": 40, "rate_kbit": null, "duration_s": 5.0 })),
    )
    .await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let uri = format!("/experiments/{}", started["run_id"]);
    let api = eventually(Duration::from_secs(20), async || {
        let (_, r) = call(&app, "GET", &uri, None).await;
        (r["finished"] == true).then_some(r)
    })
    .await;
    assert_eq!(api["spec"], cli["spec"]);
    assert_eq!(api["phases"], cli["phases"]);
    assert_eq!(api["energy_report"], cli["energy_report"]);
}
