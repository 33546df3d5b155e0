use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::template::render_template;
use super::{Action, OrchestratorError, Playbook, RunResult, Task, TaskResult, TaskStatus};
use crate::inventory::{HostEntry, Inventory};

pub const DEFAULT_FORK_LIMIT: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExecOutput {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl ExecOutput {
    pub fn ok(stdout: impl Into<String>) -> Self {
        Self {
            exit_code: 0,
            stdout: stdout.into(),
            stderr: String::new(),
        }
    }

    pub fn fail(exit_code: i32, stderr: impl Into<String>) -> Self {
        Self {
            exit_code,
            stdout: String::new(),
            stderr: stderr.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("cannot connect to {host}: {reason}")]
    ConnectFailure { host: String, reason: String },
    #[error("transport failure: {0}")]
    Io(String),
}

/// A session with one remote host.
pub trait Transport: Send {
    fn copy(&mut self, bytes: &[u8], dest: &str) -> Result<(), TransportError>;
    fn exec(&mut self, command: &str, privileged: bool) -> Result<ExecOutput, TransportError>;
}

/// Opens a [`Transport`] per host. Called from worker threads.
pub trait TransportFactory: Sync {
    fn connect(&self, host: &str) -> Result<Box<dyn Transport>, TransportError>;
}

impl<F> TransportFactory for F
where
    F: Fn(&str) -> Result<Box<dyn Transport>, TransportError> + Sync,
{
    fn connect(&self, host: &str) -> Result<Box<dyn Transport>, TransportError> {
        self(host)
    }
}

/// Where `copy` tasks read their `src` from.
pub trait LocalFiles: Sync {
    fn read(&self, path: &str) -> Result<Vec<u8>, String>;
}

/// Files relative to a playbook directory.
#[derive(Debug, Clone)]
pub struct DirFiles {
    root: PathBuf,
}

impl DirFiles {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl LocalFiles for DirFiles {
    fn read(&self, path: &str) -> Result<Vec<u8>, String> {
        let p = Path::new(path);
        let full = if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        };
        std::fs::read(&full).map_err(|e| format!("{}: {e}", full.display()))
    }
}

/// In-memory file set; `./x` and `x` name the same file.
#[derive(Debug, Clone, Default)]
pub struct MemFiles {
    files: BTreeMap<String, Vec<u8>>,
}

impl MemFiles {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: &str, bytes: impl Into<Vec<u8>>) {
        self.files.insert(normalize(path).to_string(), bytes.into());
    }

    pub fn with(mut self, path: &str, bytes: impl Into<Vec<u8>>) -> Self {
        self.insert(path, bytes);
        self
    }
}

fn normalize(path: &str) -> &str {
    path.trim_start_matches("./")
}

impl LocalFiles for MemFiles {
    fn read(&self, path: &str) -> Result<Vec<u8>, String> {
        self.files
            .get(normalize(path))
            .cloned()
            .ok_or_else(|| format!("{path}: no such file"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecOptions {
    pub extra_vars: BTreeMap<String, String>,
    pub fork_limit: usize,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self {
            extra_vars: BTreeMap::new(),
            fork_limit: DEFAULT_FORK_LIMIT,
        }
    }
}

impl ExecOptions {
    pub fn with_var(mut self, key: &str, value: &str) -> Self {
        self.extra_vars.insert(key.to_string(), value.to_string());
        self
    }
}

/// Systemd unit written by service-install tasks. Output goes to `log`.
pub fn service_unit_text(unit: &str, exec: &str, log: &str) -> String {
    format!(
        "[Unit]\n\
         Description={unit}\n\
         After=network-online.target\n\
         \n\
         [Service]\n\
         ExecStart={exec}\n\
         StandardOutput=append:{log}\n\
         StandardError=append:{log}\n\
         Restart=on-failure\n\
         \n\
         [Install]\n\
         WantedBy=multi-user.target\n"
    )
}

/// Run every task of `pb` on every host of its group.
///
/// Hosts progress independently, at most `fork_limit` at a time; each host
/// stops at its first failed task. Results always cover every host.
pub fn execute_playbook(
    pb: &Playbook,
    inv: &Inventory,
    opts: &ExecOptions,
    transports: &dyn TransportFactory,
    files: &dyn LocalFiles,
) -> Result<RunResult, OrchestratorError> {
    if opts.fork_limit == 0 {
        return Err(OrchestratorError::InvalidForkLimit);
    }
    let group = inv.resolve_group(&pb.hosts)?;
    let hosts = &group.hosts;
    let next = AtomicUsize::new(0);
    let done: Mutex<Vec<(usize, Vec<TaskResult>)>> = Mutex::new(Vec::with_capacity(hosts.len()));

    std::thread::scope(|scope| {
        for _ in 0..opts.fork_limit.min(hosts.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(host) = hosts.get(i) else { break };
                let results = run_host(pb, host, opts, transports, files);
                done.lock().expect("result merge poisoned").push((i, results));
            });
        }
    });

    let mut done = done.into_inner().expect("result merge poisoned");
    done.sort_by_key(|(i, _)| *i);
    Ok(RunResult {
        results: done.into_iter().flat_map(|(_, r)| r).collect(),
    })
}

fn host_vars(pb: &Playbook, host: &HostEntry, opts: &ExecOptions) -> BTreeMap<String, String> {
    let mut vars = host.vars.clone();
    vars.insert("inventory_hostname".into(), host.address.clone());
    vars.extend(pb.vars.iter().map(|(k, v)| (k.clone(), v.clone())));
    vars.extend(opts.extra_vars.iter().map(|(k, v)| (k.clone(), v.clone())));
    vars
}

fn run_host(
    pb: &Playbook,
    host: &HostEntry,
    opts: &ExecOptions,
    transports: &dyn TransportFactory,
    files: &dyn LocalFiles,
) -> Vec<TaskResult> {
    let vars = host_vars(pb, host, opts);
    let names: Vec<String> = pb
        .tasks
        .iter()
        .map(|t| render_template(&t.name, &vars).unwrap_or_else(|_| t.name.clone()))
        .collect();
    let result = |i: usize, status, exit_code, stdout: String, stderr: String| TaskResult {
        host: host.address.clone(),
        task_name: names[i].clone(),
        status,
        exit_code,
        stdout,
        stderr,
    };
    let skip_from = |out: &mut Vec<TaskResult>, from: usize| {
        for i in from..pb.tasks.len() {
            out.push(result(i, TaskStatus::Skipped, None, String::new(), String::new()));
        }
    };

    let mut out = Vec::with_capacity(pb.tasks.len());
    let mut transport = match transports.connect(&host.address) {
        Ok(t) => t,
        Err(e) => {
            out.push(result(0, TaskStatus::Failed, None, String::new(), e.to_string()));
            skip_from(&mut out, 1);
            return out;
        }
    };
    for (i, task) in pb.tasks.iter().enumerate() {
        let r = match run_task(task, &vars, pb.privileged, transport.as_mut(), files) {
            Ok(o) if o.exit_code == 0 => result(i, TaskStatus::Ok, Some(0), o.stdout, o.stderr),
            Ok(o) => result(i, TaskStatus::Failed, Some(o.exit_code), o.stdout, o.stderr),
            Err(msg) => result(i, TaskStatus::Failed, None, String::new(), msg),
        };
        let failed = r.status == TaskStatus::Failed;
        out.push(r);
        if failed {
            tracing::debug!(host = %host.address, task = %names[i], "task failed");
            skip_from(&mut out, i + 1);
            break;
        }
    }
    out
}

fn run_task(
    task: &Task,
    vars: &BTreeMap<String, String>,
    privileged: bool,
    transport: &mut dyn Transport,
    files: &dyn LocalFiles,
) -> Result<ExecOutput, String> {
    let render = |t: &str| render_template(t, vars).map_err(|e| e.to_string());
    match &task.action {
        Action::CopyFile { src, dest } => {
            let src = render(src)?;
            let mut dest = render(dest)?;
            let bytes = files.read(&src)?;
            if dest.ends_with('/') {
                let base = Path::new(&src)
                    .file_name()
                    .and_then(|n| n.to_str())
                    .ok_or_else(|| format!("cannot derive a file name from {src:?}"))?;
                dest.push_str(base);
            }
            transport.copy(&bytes, &dest).map_err(|e| e.to_string())?;
            Ok(ExecOutput::ok(format!("copied {} bytes to {dest}", bytes.len())))
        }
        Action::Shell { command } => {
            let command = render(command)?;
            transport.exec(&command, privileged).map_err(|e| e.to_string())
        }
        Action::ServiceInstall { unit, exec, log } => {
            let exec = render(exec)?;
            let log = render(log)?;
            let path = format!("/etc/systemd/system/{unit}.service");
            transport
                .copy(service_unit_text(unit, &exec, &log).as_bytes(), &path)
                .map_err(|e| e.to_string())?;
            transport
                .exec(
                    &format!("systemctl daemon-reload && systemctl enable --now {unit}"),
                    privileged,
                )
                .map_err(|e| e.to_string())
        }
    }
}
