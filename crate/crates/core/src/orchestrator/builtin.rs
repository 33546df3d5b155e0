//! Playbooks and files shipped with the tool.

use super::MemFiles;
use crate::power::{
    plan_switch, render_gpio_script, PlanOptions, RelayBank, RelayState, ScriptMode,
    SwitchRequest, DEFAULT_STAGGER_MS,
};
use crate::NodeId;

const ODROIDS_POWER: &str = "\
---
# Switch every worker through its rack relay bank.
- hosts: odroids-control
  become: yes
  tasks:
    - name: copy swr file to remote host
      copy:
        src: ./gpio.sh
        dest: /home/odroid/
    - name: switch odroids  {{ power }}
      shell:
        | bash /home/odroid/gpio.sh {{ power }}
";

const SERVICE_INIT: &str = "\
---
# Install the workload binary and start it as a boot service.
# Logs go to /var/log/workload.log on the node.
- hosts: odroids-testgroup
  become: yes
  tasks:
    - name: copy workload binary
      copy:
        src: ./workload
        dest: /usr/local/bin/
    - name: install workload service
      service:
        unit: workload
        exec: /usr/local/bin/workload daemon
        log: /var/log/workload.log
";

const LINK_SETUP: &str = "\
---
# Fix link delay and bandwidth for a deterministic measurement.
- hosts: odroids-testgroup
  become: yes
  vars:
    delay_ms: 20
    rate_kbit: 10000
  tasks:
    - name: shape link to {{ delay_ms }} ms / {{ rate_kbit }} kbit
      shell: link set {{ delay_ms }} {{ rate_kbit }}
";

const EXPERIMENT_RESET: &str = "\
---
# Remove workload content and traffic control settings.
- hosts: odroids-testgroup
  become: yes
  tasks:
    - name: remove workload content and services
      shell: workload clear
    - name: reset traffic control
      shell: link reset
";

/// Name and source of every builtin playbook.
pub fn builtin_playbooks() -> Vec<(&'static str, &'static str)> {
    vec![
        ("odroids_power", ODROIDS_POWER),
        ("service_init", SERVICE_INIT),
        ("link_setup", LINK_SETUP),
        ("experiment_reset", EXPERIMENT_RESET),
    ]
}

pub fn builtin_playbook(name: &str) -> Option<&'static str> {
    builtin_playbooks()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, src)| src)
}

/// Stand-in for a workload binary built for the nodes.
pub const WORKLOAD_BLOB: &[u8] = b"\x7fELF\x02\x01\x01\x00netpg-workload-stub\n";

/// Combined relay script switching relays 0..3 in order, `stagger_ms` apart.
pub fn gpio_script_asset(stagger_ms: u64) -> String {
    let workers: Vec<NodeId> = (1..=16).map(NodeId).collect();
    let bank = RelayBank::contiguous(NodeId(0), &workers).expect("static layout");
    let requests: Vec<SwitchRequest> = (0..4)
        .map(|relay_id| SwitchRequest {
            bank: NodeId(0),
            relay_id,
            target: RelayState::On,
        })
        .collect();
    let plan = plan_switch(&[bank], &requests, &PlanOptions::with_stagger(stagger_ms))
        .expect("static plan");
    render_gpio_script(&plan, ScriptMode::Combined)
        .expect("single bank")
        .remove(0)
        .text
}

/// Local files referenced by the builtin playbooks.
pub fn builtin_files() -> MemFiles {
    MemFiles::new()
        .with("gpio.sh", gpio_script_asset(DEFAULT_STAGGER_MS))
        .with("workload", WORKLOAD_BLOB.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::{parse_playbook, Action};
    use crate::power::parse_gpio_script;

    #[test]
    fn all_builtins_parse() {
        for (name, src) in builtin_playbooks() {
            let pb = parse_playbook(src).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(pb.privileged, "{name}");
        }
        assert_eq!(parse_playbook(builtin_playbook("odroids_power").unwrap()).unwrap().tasks.len(), 2);
        assert!(builtin_playbook("nonexistent").is_none());
    }

    #[test]
    fn service_init_logs_under_var() {
        let pb = parse_playbook(SERVICE_INIT).unwrap();
        match &pb.tasks[1].action {
            Action::ServiceInstall { log, .. } => assert!(log.starts_with("/var/")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gpio_asset_staggers_all_four_pins() {
        let program = parse_gpio_script(&gpio_script_asset(500)).unwrap();
        let writes = program.run(&["on".to_string()]).unwrap();
        let times: Vec<u64> = writes.iter().map(|w| w.at_ms).collect();
        let pins: Vec<u16> = writes.iter().map(|w| w.pin).collect();
        assert_eq!(times, vec![0, 500, 1000, 1500]);
        assert_eq!(pins, vec![0, 1, 2, 3]);
    }
}
