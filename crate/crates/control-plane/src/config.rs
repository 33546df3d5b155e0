//! Service configuration, read from a flat `key=value` file.

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};

use netpg_core::kv::{KvError, KvFile};
use netpg_core::orchestrator::DEFAULT_FORK_LIMIT;
use netpg_core::power::DEFAULT_STAGGER_MS;
use thiserror::Error;

pub const DEFAULT_HTTP_PORT: u16 = 8231;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub bind: IpAddr,
    pub port: u16,
    /// Virtual seconds per wall-clock second while serving.
    pub speed: f64,
    /// Wall-clock pacer tick.
    pub tick_ms: u64,
    pub stagger_ms: u64,
    pub fork_limit: usize,
    pub scenario: Option<PathBuf>,
    /// Extra playbooks and their local files.
    pub playbook_dir: Option<PathBuf>,
    /// Bound on stream messages buffered per subscriber.
    pub stream_buffer: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: IpAddr::V4(Ipv4Addr::LOCALHOST),
            port: DEFAULT_HTTP_PORT,
            speed: 1.0,
            tick_ms: 10,
            stagger_ms: DEFAULT_STAGGER_MS,
            fork_limit: DEFAULT_FORK_LIMIT,
            scenario: None,
            playbook_dir: None,
            stream_buffer: 8192,
        }
    }
}

const KEYS: &[&str] = &[
    "bind",
    "port",
    "speed",
    "tick_ms",
    "stagger_ms",
    "fork_limit",
    "scenario",
    "playbook_dir",
    "stream_buffer",
];

impl ServiceConfig {
    pub fn merge_kv(mut self, kv: &KvFile) -> Result<Self, ConfigError> {
        kv.check_keys(KEYS)?;
        if let Some(v) = kv.parsed("bind")? {
            self.bind = v;
        }
        if let Some(v) = kv.parsed("port")? {
            self.port = v;
        }
        if let Some(v) = kv.parsed("speed")? {
            self.speed = v;
        }
        if let Some(v) = kv.parsed("tick_ms")? {
            self.tick_ms = v;
        }
        if let Some(v) = kv.parsed("stagger_ms")? {
            self.stagger_ms = v;
        }
        if let Some(v) = kv.parsed("fork_limit")? {
            self.fork_limit = v;
        }
        if let Some(v) = kv.get("scenario") {
            self.scenario = Some(PathBuf::from(v));
        }
        if let Some(v) = kv.get("playbook_dir") {
            self.playbook_dir = Some(PathBuf::from(v));
        }
        if let Some(v) = kv.parsed("stream_buffer")? {
            self.stream_buffer = v;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let cfg = Self::default().merge_kv(&KvFile::parse(&text)?)?;
        Ok(cfg.relative_to(path.parent().unwrap_or(Path::new("."))))
    }

    fn relative_to(mut self, base: &Path) -> Self {
        for p in [&mut self.scenario, &mut self.playbook_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.speed.is_finite() && self.speed > 0.0) {
            return Err(ConfigError::Invalid(format!("speed must be positive, got {}", self.speed)));
        }
        if self.tick_ms == 0 || self.stagger_ms == 0 || self.fork_limit == 0 || self.stream_buffer == 0 {
            return Err(ConfigError::Invalid(
                "tick_ms, stagger_ms, fork_limit and stream_buffer must be nonzero".into(),
            ));
        }
        Ok(())
    }

    pub fn socket_addr(&self) -> SocketAddr {
        SocketAddr::new(self.bind, self.port)
    }
}
