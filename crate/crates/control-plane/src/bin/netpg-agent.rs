//! Per-node telemetry agent.

use std::net::IpAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use netpg_core::agent::{run_agent, AgentConfig, DriverKind, PiecewiseProfile, ProfileSensor};
use netpg_core::clock::{Clock, SystemClock};
use netpg_core::kv::KvFile;
use netpg_core::sim::CurrentProfile;
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "netpg-agent", version, about = "Stream current and bus voltage to collectors over TCP")]
struct Args {
    /// Flat `key=value` config (node_id, bind, port, period_ms, driver)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long = "period-ms")]
    period_ms: Option<u32>,
    #[arg(long = "node-id")]
    node_id: Option<u16>,
    /// `simulated` or `hardware`
    #[arg(long)]
    driver: Option<DriverKind>,
    #[arg(long)]
    bind: Option<IpAddr>,
}

fn config(args: &Args) -> Result<AgentConfig, String> {
    let mut cfg = AgentConfig::default();
    if let Some(p) = &args.config {
        let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
        let kv = KvFile::parse(&text).map_err(|e| format!("{}: {e}", p.display()))?;
        cfg = cfg.merge_kv(&kv).map_err(|e| format!("{}: {e}", p.display()))?;
    }
    if let Some(v) = args.port {
        cfg.listen_port = v;
    }
    if let Some(v) = args.period_ms {
        cfg.sample_period_ms = v;
    }
    if let Some(v) = args.node_id {
        cfg.node_id = v;
    }
    if let Some(v) = args.driver {
        cfg.driver = v;
    }
    if let Some(v) = args.bind {
        cfg.bind_addr = v;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    let cfg = match config(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if cfg.driver == DriverKind::Hardware {
        eprintln!("error: no hardware sensor driver in this build; use --driver simulated");
        return ExitCode::from(1);
    }
    let clock: Arc<dyn Clock> = Arc::new(SystemClock::new());
    let p = CurrentProfile::default();
    let sensor = ProfileSensor::new(
        clock.clone(),
        PiecewiseProfile::boot_then_idle(p.boot_ua, p.idle_ua, p.bus_mv, 5_000_000),
    );
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let served = rt.block_on(run_agent(
        cfg,
        sensor,
        clock,
        async {
            let _ = tokio::signal::ctrl_c().await;
        },
        |addr| tracing::info!(%addr, "agent listening"),
    ));
    match served {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
