//! Minimal playbooks: copy, shell and service-install tasks run against an
//! inventory group over a pluggable [`Transport`].
//!
//! # Grammar
//!
//! A playbook is a small, strict, indentation-based subset of YAML. Indent
//! with spaces only. A document holds exactly one play:
//!
//! ```text
//! ---
//! # comment lines start with '#'
//! - hosts: <group>
//!   become: yes|no|true|false
//!   vars:
//!     <name>: <value>
//!   tasks:
//!     - name: <text, may use {{ vars }}>
//!       copy:
//!         src: <local path>
//!         dest: <remote path; trailing '/' means a directory>
//!     - name: <text>
//!       shell: <command>            # or `shell: |` followed by a block,
//!                                   # or `shell:` followed by `| <command>`
//!     - name: <text>
//!       service:
//!         unit: <identifier>
//!         exec: <command line>
//!         log: <log file path>
//! ```
//!
//! Every task needs exactly one of `copy`, `shell` or `service`. Any other
//! key is rejected.

mod builtin;
mod parse;
mod run;
mod template;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use builtin::{builtin_files, builtin_playbook, builtin_playbooks, gpio_script_asset, WORKLOAD_BLOB};
pub use parse::parse_playbook;
pub use run::{
    execute_playbook, service_unit_text, DirFiles, ExecOptions, ExecOutput, LocalFiles, MemFiles,
    Transport, TransportError, TransportFactory, DEFAULT_FORK_LIMIT,
};
pub use template::{render_template, TemplateError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Playbook {
    pub hosts: String,
    #[serde(rename = "become")]
    pub privileged: bool,
    pub vars: BTreeMap<String, String>,
    pub tasks: Vec<Task>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub name: String,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    CopyFile { src: String, dest: String },
    Shell { command: String },
    ServiceInstall { unit: String, exec: String, log: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlaybookError {
    #[error("line {line}: bad indentation")]
    MalformedIndentation { line: usize },
    #[error("line {line}: cannot parse {text:?}")]
    MalformedLine { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: unknown action `{kind}`")]
    UnknownActionKind { line: usize, kind: String },
    #[error("line {line}: task has no action")]
    MissingAction { line: usize },
    #[error("line {line}: task has more than one action")]
    MultipleActions { line: usize },
    #[error("line {line}: `{field}` is required")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: invalid value {value:?} for `{key}`")]
    InvalidValue { line: usize, key: String, value: String },
    #[error("line {line}: only one play per playbook is supported")]
    MultiplePlays { line: usize },
    #[error("playbook has no `hosts`")]
    MissingHosts,
    #[error("playbook has no tasks")]
    EmptyTasks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Ok,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskResult {
    pub host: String,
    pub task_name: String,
    pub status: TaskStatus,
    pub exit_code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
}

/// Per-host, per-task results. Hosts appear in inventory order, tasks in
/// source order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunResult {
    pub results: Vec<TaskResult>,
}

impl RunResult {
    pub fn succeeded(&self) -> bool {
        self.results.iter().all(|r| r.status != TaskStatus::Failed)
    }

    pub fn for_host<'a>(&'a self, host: &'a str) -> impl Iterator<Item = &'a TaskResult> + 'a {
        self.results.iter().filter(move |r| r.host == host)
    }

    pub fn statuses(&self, host: &str) -> Vec<TaskStatus> {
        self.for_host(host).map(|r| r.status).collect()
    }

    pub fn count(&self, status: TaskStatus) -> usize {
        self.results.iter().filter(|r| r.status == status).count()
    }

    pub fn failed_hosts(&self) -> Vec<&str> {
        let mut hosts: Vec<&str> = self
            .results
            .iter()
            .filter(|r| r.status == TaskStatus::Failed)
            .map(|r| r.host.as_str())
            .collect();
        hosts.dedup();
        hosts
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Playbook(#[from] PlaybookError),
    #[error(transparent)]
    Inventory(#[from] crate::inventory::InventoryError),
    #[error("fork limit must be at least 1")]
    InvalidForkLimit,
}

/// True when `statuses` has the shape `Ok* (Failed Skipped*)?`.
pub fn is_fail_fast(statuses: &[TaskStatus]) -> bool {
    let first_bad = statuses.iter().position(|s| *s != TaskStatus::Ok);
    match first_bad {
        None => true,
        Some(i) => {
            statuses[i] == TaskStatus::Failed
                && statuses[i + 1..].iter().all(|s| *s == TaskStatus::Skipped)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use TaskStatus::*;

    #[test]
    fn fail_fast_shape() {
        assert!(is_fail_fast(&[]));
        assert!(is_fail_fast(&[Ok, Ok]));
        assert!(is_fail_fast(&[Ok, Failed, Skipped]));
        assert!(is_fail_fast(&[Failed]));
        assert!(!is_fail_fast(&[Skipped]));
        assert!(!is_fail_fast(&[Failed, Ok]));
        assert!(!is_fail_fast(&[Ok, Failed, Failed]));
    }
}
