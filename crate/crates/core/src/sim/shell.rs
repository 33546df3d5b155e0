//! The command vocabulary of simulated nodes.
//!
//! Command text is split into lines and `&&` chains; each simple command is
//! tokenised with shell quoting rules and dispatched by name. A script stops
//! at the first non-zero exit. `sudo` as the first word grants privilege.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::testbed::{NodeRole, SimTestbed, TraceEvent, Unit};
use super::SimError;
use crate::linkshape::{LinkConfig, Rate};
use crate::orchestrator::ExecOutput;
use crate::power::parse_gpio_script;
use crate::NodeId;

/// One simple command as seen by a handler.
#[derive(Debug, Clone)]
pub struct Invocation<'a> {
    pub node: NodeId,
    /// `args[0]` is the command name.
    pub args: &'a [String],
    pub privileged: bool,
}

pub type CommandFn = Arc<dyn Fn(&mut SimTestbed, &Invocation<'_>) -> ExecOutput + Send + Sync>;

const UNIT_DIR: &str = "/etc/systemd/system/";
const WORKLOAD_PATHS: &[&str] = &["/var/lib/workload", "/usr/local/bin/workload"];

pub(super) fn default_registry() -> BTreeMap<String, CommandFn> {
    let mut m: BTreeMap<String, CommandFn> = BTreeMap::new();
    let mut add = |name: &str, f: fn(&mut SimTestbed, &Invocation<'_>) -> ExecOutput| {
        m.insert(name.to_string(), Arc::new(f));
    };
    add("true", |_, _| ExecOutput::ok(""));
    add("false", |_, _| ExecOutput::fail(1, ""));
    add("echo", |_, inv| ExecOutput::ok(format!("{}\n", inv.args[1..].join(" "))));
    add("exit", |_, inv| {
        let code = inv.args.get(1).and_then(|c| c.parse().ok()).unwrap_or(0);
        ExecOutput { exit_code: code, ..Default::default() }
    });
    add("sleep", |_, _| ExecOutput::ok(""));
    add("whoami", |_, inv| ExecOutput::ok(if inv.privileged { "root\n" } else { "odroid\n" }));
    add("mkdir", |_, _| ExecOutput::ok(""));
    add("cat", cmd_cat);
    add("rm", cmd_rm);
    add("bash", cmd_script);
    add("sh", cmd_script);
    add("link", cmd_link);
    add("systemctl", cmd_systemctl);
    add("workload", cmd_workload);
    m
}

fn denied(what: &str) -> ExecOutput {
    ExecOutput::fail(1, format!("{what}: Permission denied\n"))
}

fn cmd_cat(tb: &mut SimTestbed, inv: &Invocation<'_>) -> ExecOutput {
    let node = &tb.nodes[inv.node.0 as usize];
    let mut out = String::new();
    for path in &inv.args[1..] {
        match node.fs.get(path) {
            Some(bytes) => out.push_str(&String::from_utf8_lossy(bytes)),
            None => return ExecOutput::fail(1, format!("cat: {path}: No such file or directory\n")),
        }
    }
    ExecOutput::ok(out)
}

fn remove_tree(fs: &mut BTreeMap<String, Vec<u8>>, path: &str) -> bool {
    let prefix = format!("{}/", path.trim_end_matches('/'));
    let before = fs.len();
    fs.retain(|k, _| k != path && !k.starts_with(&prefix));
    fs.len() != before
}

fn cmd_rm(tb: &mut SimTestbed, inv: &Invocation<'_>) -> ExecOutput {
    let node = &mut tb.nodes[inv.node.0 as usize];
    let force = inv.args[1..].iter().any(|a| a.starts_with('-') && a.contains('f'));
    for path in inv.args[1..].iter().filter(|a| !a.starts_with('-')) {
        if !remove_tree(&mut node.fs, path) && !force {
            return ExecOutput::fail(1, format!("rm: cannot remove '{path}': No such file or directory\n"));
        }
    }
    ExecOutput::ok("")
}

/// `bash <script> args…`: only relay scripts are understood. Their pin
/// writes are scheduled on the rack's relay bank at the script's offsets.
fn cmd_script(tb: &mut SimTestbed, inv: &Invocation<'_>) -> ExecOutput {
    let shell = &inv.args[0];
    let Some(path) = inv.args.get(1) else {
        return ExecOutput::fail(2, format!("{shell}: interactive shells are not simulated\n"));
    };
    let node = &tb.nodes[inv.node.0 as usize];
    let Some(bytes) = node.fs.get(path) else {
        return ExecOutput::fail(127, format!("{shell}: {path}: No such file or directory\n"));
    };
    let program = match parse_gpio_script(&String::from_utf8_lossy(bytes)) {
        Ok(p) => p,
        Err(e) => return ExecOutput::fail(2, format!("{shell}: {path}: {e}\n")),
    };
    let writes = match program.run(&inv.args[2..]) {
        Ok(w) => w,
        Err(exit) => return ExecOutput::fail(exit.code, format!("{}\n", exit.stderr)),
    };
    if writes.is_empty() {
        return ExecOutput::ok("");
    }
    if !inv.privileged {
        return denied("/sys/class/gpio/export");
    }
    if node.role != NodeRole::Control {
        return ExecOutput::fail(1, "/sys/class/gpio/export: No such device\n");
    }
    let rack = node.rack;
    let start = tb.now_us;
    for w in writes {
        tb.schedule_gpio(start + w.at_ms * 1_000, rack, w.pin, w.level);
    }
    ExecOutput::ok("")
}

fn cmd_link(tb: &mut SimTestbed, inv: &Invocation<'_>) -> ExecOutput {
    let usage = || ExecOutput::fail(2, "usage: link set <delay_ms> <rate_kbit|unlimited> | link reset | link show\n");
    let sub = inv.args.get(1).map(String::as_str);
    if sub == Some("show") {
        let cfg = tb.links.get(inv.node).unwrap_or_default();
        return ExecOutput::ok(format!("{cfg}\n"));
    }
    if !inv.privileged && matches!(sub, Some("set" | "reset")) {
        return ExecOutput::fail(1, "link: Operation not permitted\n");
    }
    match (sub, &inv.args[2..]) {
        (Some("set"), [delay, rate]) => {
            let Ok(delay_ms) = delay.parse::<u32>() else { return usage() };
            let Ok(rate) = rate.parse::<Rate>() else { return usage() };
            let cfg = LinkConfig { delay_ms, rate };
            match tb.apply_link(inv.node, cfg) {
                Ok(_) => ExecOutput::ok(""),
                Err(e) => ExecOutput::fail(1, format!("{e}\n")),
            }
        }
        (Some("reset"), []) => match tb.reset_link(inv.node) {
            Ok(_) => ExecOutput::ok(""),
            Err(e) => ExecOutput::fail(1, format!("{e}\n")),
        },
        _ => usage(),
    }
}

fn parse_unit(text: &str) -> Option<Unit> {
    let mut exec_start = None;
    let mut log = None;
    for line in text.lines() {
        if let Some(v) = line.strip_prefix("ExecStart=") {
            exec_start = Some(v.trim().to_string());
        } else if let Some(v) = line.strip_prefix("StandardOutput=append:") {
            log = Some(v.trim().to_string());
        }
    }
    Some(Unit {
        exec_start: exec_start?,
        log,
    })
}

fn daemon_reload(tb: &mut SimTestbed, id: NodeId) {
    let node = &mut tb.nodes[id.0 as usize];
    let units: BTreeMap<String, Unit> = node
        .fs
        .iter()
        .filter_map(|(path, bytes)| {
            let name = path.strip_prefix(UNIT_DIR)?.strip_suffix(".service")?;
            Some((name.to_string(), parse_unit(&String::from_utf8_lossy(bytes))?))
        })
        .collect();
    node.enabled.retain(|u| units.contains_key(u));
    node.units = units;
}

fn cmd_systemctl(tb: &mut SimTestbed, inv: &Invocation<'_>) -> ExecOutput {
    let args: Vec<&str> = inv.args[1..].iter().map(String::as_str).collect();
    let Some((&verb, rest)) = args.split_first() else {
        return ExecOutput::fail(1, "systemctl: missing verb\n");
    };
    let now = rest.contains(&"--now");
    let unit = rest
        .iter()
        .find(|a| !a.starts_with("--"))
        .map(|u| u.trim_end_matches(".service").to_string());
    if verb == "is-active" {
        let Some(unit) = unit else { return ExecOutput::fail(1, "systemctl: unit required\n") };
        return if tb.nodes[inv.node.0 as usize].running.contains(&unit) {
            ExecOutput::ok("active\n")
        } else {
            ExecOutput { exit_code: 3, stdout: "inactive\n".into(), stderr: String::new() }
        };
    }
    if !inv.privileged {
        return ExecOutput::fail(1, "Failed to connect to bus: Access denied\n");
    }
    if verb == "daemon-reload" {
        daemon_reload(tb, inv.node);
        return ExecOutput::ok("");
    }
    let Some(unit) = unit else {
        return ExecOutput::fail(1, format!("systemctl {verb}: unit required\n"));
    };
    let node_id = inv.node;
    if !tb.nodes[node_id.0 as usize].units.contains_key(&unit) {
        return ExecOutput::fail(5, format!("Unit {unit}.service not found.\n"));
    }
    match verb {
        "enable" => {
            tb.nodes[node_id.0 as usize].enabled.insert(unit.clone());
            if now {
                tb.start_service(node_id, &unit);
            }
        }
        "disable" => {
            tb.nodes[node_id.0 as usize].enabled.remove(&unit);
            if now {
                tb.stop_service(node_id, &unit);
            }
        }
        "start" | "restart" => {
            tb.start_service(node_id, &unit);
        }
        "stop" => tb.stop_service(node_id, &unit),
        other => return ExecOutput::fail(1, format!("systemctl: unknown verb {other}\n")),
    }
    ExecOutput::ok("")
}

fn cmd_workload(tb: &mut SimTestbed, inv: &Invocation<'_>) -> ExecOutput {
    let id = inv.node;
    match inv.args.get(1).map(String::as_str) {
        Some("start") => tb.nodes[id.0 as usize].workload = true,
        Some("stop") => tb.nodes[id.0 as usize].workload = false,
        Some("status") => {
            let on = tb.nodes[id.0 as usize].under_load();
            return ExecOutput::ok(if on { "running\n" } else { "idle\n" });
        }
        Some("clear") => {
            if !inv.privileged {
                return denied("workload clear");
            }
            let units: Vec<String> = tb.nodes[id.0 as usize].units.keys().cloned().collect();
            for u in &units {
                tb.stop_service(id, u);
            }
            let node = &mut tb.nodes[id.0 as usize];
            node.enabled.clear();
            node.units.clear();
            node.fs.retain(|k, _| !k.starts_with(UNIT_DIR));
            for p in WORKLOAD_PATHS {
                remove_tree(&mut node.fs, p);
            }
            node.workload = false;
        }
        _ => return ExecOutput::fail(2, "usage: workload start|stop|status|clear\n"),
    }
    ExecOutput::ok("")
}

impl SimTestbed {
    /// Register a command for every node (`node = None`) or one node.
    pub fn register_command(
        &mut self,
        node: Option<NodeId>,
        name: &str,
        f: impl Fn(&mut SimTestbed, &Invocation<'_>) -> ExecOutput + Send + Sync + 'static,
    ) {
        let f: CommandFn = Arc::new(f);
        match node {
            Some(n) => {
                self.node_commands.insert((n, name.to_string()), f);
            }
            None => {
                self.commands.insert(name.to_string(), f);
            }
        }
    }

    /// Run a command line or multi-line script on `node` right now.
    pub fn exec(&mut self, node: NodeId, script: &str, privileged: bool) -> Result<ExecOutput, SimError> {
        self.node_ref(node)?;
        let mut total = ExecOutput::ok("");
        'lines: for line in script.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some(words) = shlex::split(line) else {
                total.exit_code = 2;
                total.stderr.push_str(&format!("syntax error: {line}\n"));
                break;
            };
            for simple in words.split(|w| w == "&&") {
                let out = self.run_simple(node, simple, privileged);
                total.stdout.push_str(&out.stdout);
                total.stderr.push_str(&out.stderr);
                total.exit_code = out.exit_code;
                if out.exit_code != 0 {
                    break 'lines;
                }
            }
        }
        self.record(TraceEvent::Exec {
            node,
            exit: total.exit_code,
            command: script.to_string(),
        });
        Ok(total)
    }

    fn run_simple(&mut self, node: NodeId, words: &[String], privileged: bool) -> ExecOutput {
        let (words, privileged) = match words.split_first() {
            Some((first, rest)) if first == "sudo" => (rest, true),
            _ => (words, privileged),
        };
        let Some(name) = words.first() else {
            return ExecOutput::fail(2, "syntax error: empty command\n");
        };
        let joined = words.join(" ");
        let injected = self.nodes[node.0 as usize]
            .faults
            .failing_commands
            .iter()
            .any(|p| joined.starts_with(p.as_str()));
        if injected {
            return ExecOutput::fail(1, format!("{name}: injected failure\n"));
        }
        let handler = self
            .node_commands
            .get(&(node, name.clone()))
            .or_else(|| self.commands.get(name))
            .cloned();
        match handler {
            Some(f) => f(
                self,
                &Invocation {
                    node,
                    args: words,
                    privileged,
                },
            ),
            None => ExecOutput::fail(127, format!("{name}: command not found\n")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::{gpio_script_asset, service_unit_text};
    use crate::power::RelayState;
    use crate::sim::{InitialPower, SimConfig};

    fn tb() -> SimTestbed {
        SimTestbed::new(SimConfig {
            racks: 1,
            initial_power: InitialPower::On,
            ..SimConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn chains_stop_at_first_failure() {
        let mut tb = tb();
        let out = tb.exec(NodeId(1), "echo a && false && echo b", false).unwrap();
        assert_eq!(out.exit_code, 1);
        assert_eq!(out.stdout, "a\n");
        let out = tb.exec(NodeId(1), "echo 'x y'\nnope", false).unwrap();
        assert_eq!(out.exit_code, 127);
        assert_eq!(out.stdout, "x y\n");
    }

    #[test]
    fn link_commands_need_privilege() {
        let mut tb = tb();
        assert_eq!(tb.exec(NodeId(2), "link set 20 10000", false).unwrap().exit_code, 1);
        assert_eq!(tb.exec(NodeId(2), "sudo link set 20 10000", false).unwrap().exit_code, 0);
        assert_eq!(tb.links().get(NodeId(2)).unwrap(), LinkConfig::new(20, Some(10_000)));
        assert_eq!(tb.exec(NodeId(2), "link show", false).unwrap().stdout, "delay=20ms rate=10000\n");
        assert_eq!(tb.exec(NodeId(2), "link set x 1", true).unwrap().exit_code, 2);
        tb.exec(NodeId(2), "link reset", true).unwrap();
        assert!(tb.links().get(NodeId(2)).unwrap().is_default());
    }

    #[test]
    fn service_lifecycle_and_clear() {
        let mut tb = tb();
        let n = NodeId(3);
        tb.write_file(n, "/etc/systemd/system/w.service", service_unit_text("w", "/bin/w", "/var/log/w.log").as_bytes())
            .unwrap();
        tb.write_file(n, "/var/lib/workload/data", b"x").unwrap();
        let out = tb.exec(n, "systemctl daemon-reload && systemctl enable --now w", true).unwrap();
        assert_eq!(out.exit_code, 0, "{out:?}");
        assert!(tb.node(n).unwrap().under_load());
        assert!(tb.node(n).unwrap().file("/var/log/w.log").is_some());
        assert_eq!(tb.exec(n, "systemctl is-active w", false).unwrap().exit_code, 0);
        assert_eq!(tb.exec(n, "systemctl enable missing", true).unwrap().exit_code, 5);
        tb.exec(n, "workload clear", true).unwrap();
        let node = tb.node(n).unwrap();
        assert!(node.units().is_empty() && node.enabled_services().is_empty());
        assert!(!node.under_load());
        assert!(node.file("/var/lib/workload/data").is_none());
        assert!(node.file("/var/log/w.log").is_some());
    }

    #[test]
    fn relay_script_schedules_staggered_writes() {
        let mut tb = SimTestbed::new(SimConfig { racks: 1, ..SimConfig::default() }).unwrap();
        tb.write_file(NodeId(0), "/home/odroid/gpio.sh", gpio_script_asset(500).as_bytes()).unwrap();
        assert_eq!(tb.exec(NodeId(0), "bash /home/odroid/gpio.sh on", false).unwrap().exit_code, 1);
        assert_eq!(tb.exec(NodeId(0), "bash /home/odroid/gpio.sh sideways", true).unwrap().exit_code, 2);
        assert_eq!(tb.exec(NodeId(0), "bash /home/odroid/missing.sh on", true).unwrap().exit_code, 127);
        assert_eq!(tb.exec(NodeId(0), "bash /home/odroid/gpio.sh on", true).unwrap().exit_code, 0);
        tb.advance(1_499_999);
        assert_eq!(tb.rack(0).unwrap().bank.relay(3).unwrap().state, RelayState::Off);
        tb.advance(1);
        assert!(tb.rack(0).unwrap().bank.relays().iter().all(|r| r.state == RelayState::On));
        assert!(!tb.rack(0).unwrap().supply.fault());
    }

    #[test]
    fn per_node_override_and_injected_failure() {
        let mut tb = tb();
        tb.register_command(Some(NodeId(4)), "echo", |_, _| ExecOutput::ok("custom\n"));
        assert_eq!(tb.exec(NodeId(4), "echo hi", false).unwrap().stdout, "custom\n");
        assert_eq!(tb.exec(NodeId(5), "echo hi", false).unwrap().stdout, "hi\n");
        tb.node_mut(NodeId(5)).unwrap().faults.failing_commands.push("link set".into());
        assert_eq!(tb.exec(NodeId(5), "link set 1 1", true).unwrap().exit_code, 1);
        assert_eq!(tb.exec(NodeId(5), "link reset", true).unwrap().exit_code, 0);
    }
}
