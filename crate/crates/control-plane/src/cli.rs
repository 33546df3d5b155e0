//! `netpg` command line. Every action goes through the same [`ControlPlane`]
//! calls as the matching HTTP endpoint, against an in-process simulator.
//!
//! Exit status: 0 on success, 1 if anything ended Failed, 2 on usage errors.

use std::ffi::OsString;
use std::io::Write;
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use netpg_core::collector::{export_report_csv, export_series_csv, ConnectionState};
use netpg_core::inventory::load_inventory;
use netpg_core::kv::KvFile;
use netpg_core::power::RelayState;
use netpg_core::sim::PowerState;

use crate::config::ServiceConfig;
use crate::http::{CollectResponse, PlaybookResponse};
use crate::model::{ApiError, CollectRequest, ExperimentSpec, PhaseStatus, PlanStatus, PlaybookRequest, PowerRequest};
use crate::service::ControlPlane;

#[derive(Debug, Parser)]
#[command(name = "netpg", version, about = "Drive the relay-powered testbed and its simulator")]
struct Cli {
    /// Inventory file (required)
    #[arg(short = 'i', long = "inventory", global = true, value_name = "PATH")]
    inventory: Option<PathBuf>,
    /// Service config file (`key=value`)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Simulator scenario file; overrides the config
    #[arg(long, global = true, value_name = "PATH")]
    scenario: Option<PathBuf>,
    /// Print results as JSON, as the HTTP API returns them
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Show node status
    Status {
        #[arg(long)]
        group: Option<String>,
    },
    /// Switch a group's relays with staggering and wait for the result
    Power {
        state: OnOff,
        #[arg(long)]
        group: String,
    },
    /// Run a playbook (builtin name or file)
    Run {
        playbook: String,
        /// `key=value` pairs; may be repeated or space-separated
        #[arg(short = 'e', long = "extra-vars", value_name = "K=V")]
        extra_vars: Vec<String>,
        #[arg(long)]
        hosts: Option<String>,
        #[arg(long)]
        fork_limit: Option<usize>,
    },
    /// Collect telemetry and write the series as CSV
    Collect {
        #[arg(long)]
        group: String,
        #[arg(long = "duration-s")]
        duration_s: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-node energy report
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Run an experiment from a `key=value` spec file
    Experiment { spec: PathBuf },
    /// Simulator service
    Sim {
        #[command(subcommand)]
        action: SimCommand,
    },
}

#[derive(Debug, Subcommand)]
enum SimCommand {
    /// Serve the HTTP API over a simulated testbed
    Serve {
        #[arg(long)]
        bind: Option<IpAddr>,
        #[arg(long)]
        port: Option<u16>,
        /// Virtual seconds per wall-clock second
        #[arg(long)]
        speed: Option<f64>,
    },
}

enum Fail {
    Usage(String),
    Failed(String),
}

impl From<ApiError> for Fail {
    fn from(e: ApiError) -> Self {
        match e {
            ApiError::NotFound(m) | ApiError::BadRequest(m) => Fail::Usage(m),
            other => Fail::Failed(other.to_string()),
        }
    }
}

fn synopsis() -> String {
    Cli::command().render_usage().to_string()
}

/// Parse `argv` and run. Output goes to `out`, diagnostics to `err`.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(Fail::Usage(m)) => {
            let _ = writeln!(err, "error: {m}\n\n{}", synopsis());
            2
        }
        Err(Fail::Failed(m)) => {
            let _ = writeln!(err, "error: {m}");
            1
        }
    }
}

fn load_config(cli: &Cli) -> Result<ServiceConfig, Fail> {
    let mut cfg = match &cli.config {
        Some(p) => ServiceConfig::load(p).map_err(|e| Fail::Usage(e.to_string()))?,
        None => ServiceConfig::default(),
    };
    if let Some(s) = &cli.scenario {
        cfg.scenario = Some(s.clone());
    }
    Ok(cfg)
}

fn build(cli: &Cli, cfg: ServiceConfig) -> Result<ControlPlane, Fail> {
    let Some(inv_path) = &cli.inventory else {
        return Err(Fail::Usage("the inventory path must be given with -i".into()));
    };
    let inventory = load_inventory(inv_path).map_err(|e| Fail::Usage(format!("{}: {e}", inv_path.display())))?;
    Ok(ControlPlane::from_config(cfg, inventory)?)
}

fn json(out: &mut dyn Write, v: &impl serde::Serialize) {
    let _ = writeln!(out, "{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn parse_extra_vars(raw: &[String]) -> Result<std::collections::BTreeMap<String, String>, Fail> {
    raw.iter()
        .flat_map(|s| s.split_whitespace())
        .map(|kv| match kv.split_once('=') {
            Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
            _ => Err(Fail::Usage(format!("--extra-vars expects key=value, got {kv:?}"))),
        })
        .collect()
}

/// A playbook argument naming an existing file runs that file, with copy
/// sources relative to its directory.
fn playbook_source(arg: &str, cfg: &mut ServiceConfig) -> String {
    let p = Path::new(arg);
    if p.is_file() {
        if let (Some(dir), Some(stem)) = (p.parent(), p.file_name()) {
            cfg.playbook_dir = Some(if dir.as_os_str().is_empty() { PathBuf::from(".") } else { dir.to_path_buf() });
            return stem.to_string_lossy().into_owned();
        }
    }
    arg.to_string()
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<bool, Fail> {
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::Status { group } => {
            let cp = build(&cli, cfg)?;
            let nodes = cp.nodes(group.as_deref())?;
            if cli.json {
                json(out, &nodes);
            } else {
                let _ = writeln!(out, "{:>4}  {:<15} {:>4}  {:<8} {:<12} {:>10} {:>6}  link", "id", "address", "rack", "power", "connection", "uA", "mV");
                for n in &nodes {
                    let link = match n.link.rate_kbit {
                        Some(r) => format!("{}ms/{r}kbit", n.link.delay_ms),
                        None => format!("{}ms", n.link.delay_ms),
                    };
                    let _ = writeln!(
                        out,
                        "{:>4}  {:<15} {:>4}  {:<8} {:<12} {:>10} {:>6}  {link}",
                        n.node_id,
                        n.address,
                        n.rack,
                        n.power.to_string(),
                        format!("{:?}", n.connection).to_lowercase(),
                        n.current_ua,
                        n.bus_mv
                    );
                }
            }
            Ok(true)
        }
        Command::Power { state, group } => {
            let cp = build(&cli, cfg)?;
            let (relay, power) = match state {
                OnOff::On => (RelayState::On, PowerState::On),
                OnOff::Off => (RelayState::Off, PowerState::Off),
            };
            let ticket = cp.power(&PowerRequest::group(group, relay))?;
            cp.wait(ticket.plan_id);
            let record = cp.plan(ticket.plan_id)?;
            let ids = cp.resolve_nodes(group)?;
            let boot_us = cp.sim().lock().config().boot_ms * 1_000;
            let reached = cp.wait_for_power(&ids, power, boot_us + 1_000_000);
            let nodes = cp.nodes(Some(group))?;
            let n_ok = nodes.iter().filter(|n| n.power == power).count();
            if cli.json {
                json(out, &serde_json::json!({ "plan": record, "nodes": nodes }));
            } else {
                let _ = writeln!(
                    out,
                    "plan {}: {} transitions over {} ms, {:?}",
                    record.plan_id, record.transitions, record.span_ms, record.status
                );
                let _ = writeln!(out, "{n_ok}/{} nodes {power}", nodes.len());
            }
            Ok(reached && record.status == PlanStatus::Done)
        }
        Command::Run {
            playbook,
            extra_vars,
            hosts,
            fork_limit,
        } => {
            let extra_vars = parse_extra_vars(extra_vars)?;
            let playbook = playbook_source(playbook, &mut cfg);
            let cp = build(&cli, cfg)?;
            let res = PlaybookResponse::from(cp.run_playbook(&PlaybookRequest {
                playbook,
                extra_vars,
                hosts: hosts.clone(),
                fork_limit: *fork_limit,
            })?);
            if cli.json {
                json(out, &res);
            } else {
                for r in &res.run.results {
                    let _ = writeln!(out, "{:<15} {:<40} {:?}", r.host, r.task_name, r.status);
                    if !r.stderr.is_empty() {
                        let _ = writeln!(out, "    {}", r.stderr.trim_end());
                    }
                }
                let failed = res.run.failed_hosts();
                if !failed.is_empty() {
                    let _ = writeln!(out, "failed hosts: {}", failed.join(", "));
                }
            }
            Ok(res.succeeded)
        }
        Command::Collect {
            group,
            duration_s,
            out: path,
            report_out,
        } => {
            let cp = build(&cli, cfg)?;
            let res = CollectResponse::from(cp.collect(&CollectRequest {
                group: group.clone(),
                duration_s: *duration_s,
            })?);
            export_series_csv(&res.series, path).map_err(|e| Fail::Failed(e.to_string()))?;
            if let Some(r) = report_out {
                export_report_csv(&res.report, r).map_err(|e| Fail::Failed(e.to_string()))?;
            }
            if cli.json {
                json(out, &res.report);
            } else {
                for n in &res.report.nodes {
                    let _ = writeln!(out, "node {:>4}: {:>9.3} J over {:.3} s ({} samples)", n.node_id, n.energy_j, n.duration_s, n.sample_count);
                }
                let _ = writeln!(out, "total {:.3} J", res.report.total_energy_j);
                for w in &res.report.warnings {
                    let _ = writeln!(out, "warning: {w}");
                }
            }
            Ok(res.series.values().all(|s| s.connection_state == ConnectionState::Connected))
        }
        Command::Experiment { spec } => {
            let text = std::fs::read_to_string(spec).map_err(|e| Fail::Usage(format!("{}: {e}", spec.display())))?;
            let kv = KvFile::parse(&text).map_err(|e| Fail::Usage(format!("{}: {e}", spec.display())))?;
            let spec = ExperimentSpec::from_kv(&kv)?;
            let cp = build(&cli, cfg)?;
            let run_id = cp.start_experiment(spec)?;
            cp.wait(run_id);
            let run = cp.experiment(run_id)?;
            if cli.json {
                json(out, &run);
            } else {
                for p in &run.phases {
                    let status = format!("{:?}", p.status).to_lowercase();
                    let _ = writeln!(out, "{:<12} {:<8} {}", format!("{:?}", p.phase), status, p.detail.as_deref().unwrap_or(""));
                }
                if let Some(r) = &run.energy_report {
                    for n in &r.nodes {
                        let _ = writeln!(out, "node {:>4}: {:>9.3} J", n.node_id, n.energy_j);
                    }
                    let _ = writeln!(out, "total {:.3} J", r.total_energy_j);
                    for w in &r.warnings {
                        let _ = writeln!(out, "warning: {w}");
                    }
                }
            }
            Ok(!run.phases.iter().any(|p| p.status == PhaseStatus::Failed))
        }
        Command::Sim {
            action: SimCommand::Serve { bind, port, speed },
        } => {
            if let Some(b) = bind {
                cfg.bind = *b;
            }
            if let Some(p) = port {
                cfg.port = *p;
            }
            if let Some(s) = speed {
                cfg.speed = *s;
            }
            cfg.validate().map_err(|e| Fail::Usage(e.to_string()))?;
            let addr = cfg.socket_addr();
            let cp = build(&cli, cfg)?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| Fail::Failed(e.to_string()))?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr)
                    .await
                    .map_err(|e| Fail::Failed(format!("cannot bind {addr}: {e}")))?;
                let _ = writeln!(out, "serving on http://{}", listener.local_addr().unwrap_or(addr));
                let _ = out.flush();
                crate::http::serve(cp, listener, async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await
                .map_err(|e| Fail::Failed(e.to_string()))
            })?;
            Ok(true)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_str(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(args.iter().copied(), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn missing_inventory_is_a_usage_error() {
        let (code, _, err) = run_str(&["netpg", "status"]);
        assert_eq!(code, 2);
        assert!(err.contains("-i") && err.contains("Usage"), "{err}");
    }

    #[test]
    fn unknown_subcommand_and_bad_vars() {
        assert_eq!(run_str(&["netpg", "frobnicate"]).0, 2);
        assert_eq!(run_str(&["netpg", "-i", "x", "run", "odroids_power", "--extra-vars", "power"]).0, 2);
        assert_eq!(run_str(&["netpg", "--help"]).0, 0);
    }

    #[test]
    fn extra_vars_split_on_whitespace() {
        let Ok(v) = parse_extra_vars(&["a=1 b=2".into(), "c=x=y".into()]) else { panic!() };
        assert_eq!(v.len(), 3);
        assert_eq!(v["c"], "x=y");
    }
}
