//! Shell scripts that drive the relay pins through sysfs, and a strict
//! interpreter for exactly the dialect we emit. The simulator uses the
//! interpreter so that a copied script behaves the same way it would on a
//! control node.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

use super::{Level, PowerError, TransitionPlan};

const SYSFS_GPIO: &str = "/sys/class/gpio";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScriptMode {
    /// One script per relay.
    PerRelay,
    /// One script switching every relay of the plan in order.
    Combined,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GpioScript {
    pub file_name: String,
    pub text: String,
}

/// Render the pin writes of a single-bank plan as POSIX shell.
///
/// The on/off level is taken from the script's first argument; the plan
/// contributes which pins are written, their order and the sleeps between
/// them.
pub fn render_gpio_script(
    plan: &TransitionPlan,
    mode: ScriptMode,
) -> Result<Vec<GpioScript>, PowerError> {
    let banks = plan.banks();
    if banks.len() > 1 {
        return Err(PowerError::MultiBankPlan);
    }
    let bank = banks.first().map(|b| b.to_string()).unwrap_or_default();

    match mode {
        ScriptMode::Combined => {
            let relays: Vec<String> = plan
                .transitions
                .iter()
                .map(|t| t.relay_id.to_string())
                .collect();
            let mut text = header(
                "gpio.sh",
                &format!(
                    "Relay bank of control node {bank}: relays {} in order.",
                    relays.join(" ")
                ),
            );
            let mut prev_at = None;
            for t in &plan.transitions {
                if let Some(prev) = prev_at {
                    let gap = t.at_ms - prev;
                    if gap > 0 {
                        let _ = writeln!(text, "sleep {}", format_seconds(gap));
                    }
                }
                push_write(&mut text, t.gpio_pin);
                prev_at = Some(t.at_ms);
            }
            Ok(vec![GpioScript {
                file_name: "gpio.sh".into(),
                text,
            }])
        }
        ScriptMode::PerRelay => Ok(plan
            .transitions
            .iter()
            .map(|t| {
                let file_name = format!("gpio_relay{}.sh", t.relay_id);
                let mut text = header(
                    &file_name,
                    &format!("Relay {} of control node {bank}.", t.relay_id),
                );
                push_write(&mut text, t.gpio_pin);
                GpioScript { file_name, text }
            })
            .collect()),
    }
}

fn header(file_name: &str, description: &str) -> String {
    format!(
        "#!/bin/sh\n\
         # {description}\n\
         # usage: {file_name} on|off\n\
         case \"$1\" in\n\
         \x20 on) LEVEL=1 ;;\n\
         \x20 off) LEVEL=0 ;;\n\
         \x20 *) echo \"usage: $0 on|off\" >&2; exit 2 ;;\n\
         esac\n\
         GPIO={SYSFS_GPIO}\n\
         gpio_export() {{ [ -d \"$GPIO/gpio$1\" ] || echo \"$1\" > \"$GPIO/export\"; echo out > \"$GPIO/gpio$1/direction\"; }}\n"
    )
}

fn push_write(text: &mut String, pin: u16) {
    let _ = writeln!(text, "gpio_export {pin}");
    let _ = writeln!(text, "echo \"$LEVEL\" > \"$GPIO/gpio{pin}/value\"");
}

fn format_seconds(ms: u64) -> String {
    let whole = ms / 1000;
    let frac = ms % 1000;
    if frac == 0 {
        whole.to_string()
    } else {
        let f = format!("{frac:03}");
        format!("{whole}.{}", f.trim_end_matches('0'))
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ScriptError {
    #[error("line {line}: unsupported statement {text:?}")]
    Unsupported { line: usize, text: String },
    #[error("`case` block opened on line {line} is never closed")]
    UnclosedCase { line: usize },
}

/// Non-zero exit of an interpreted script.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("exit {code}: {stderr}")]
pub struct ScriptExit {
    pub code: i32,
    pub stderr: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScriptWrite {
    /// Offset from script start.
    pub at_ms: u64,
    pub pin: u16,
    pub level: Level,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum CaseAction {
    SetLevel(Level),
    Exit { code: i32, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Value {
    LevelVar,
    Literal(Level),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Stmt {
    Case(Vec<(String, CaseAction)>),
    Export(u16),
    Write { pin: u16, value: Value },
    Sleep(u64),
}

/// A parsed relay script.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GpioProgram {
    stmts: Vec<Stmt>,
}

pub fn parse_gpio_script(text: &str) -> Result<GpioProgram, ScriptError> {
    let mut stmts = Vec::new();
    let mut lines = text.lines().enumerate().peekable();
    while let Some((idx, raw)) = lines.next() {
        let line = raw.trim();
        let unsupported = || ScriptError::Unsupported {
            line: idx + 1,
            text: raw.to_string(),
        };
        if line.is_empty()
            || line.starts_with('#')
            || line == "set -e"
            || line == format!("GPIO={SYSFS_GPIO}")
            || line.starts_with("gpio_export() {")
        {
            continue;
        }
        if line == "case \"$1\" in" {
            let mut arms = Vec::new();
            loop {
                let Some((arm_idx, arm_raw)) = lines.next() else {
                    return Err(ScriptError::UnclosedCase { line: idx + 1 });
                };
                let arm = arm_raw.trim();
                if arm == "esac" {
                    break;
                }
                arms.push(parse_arm(arm).ok_or(ScriptError::Unsupported {
                    line: arm_idx + 1,
                    text: arm_raw.to_string(),
                })?);
            }
            stmts.push(Stmt::Case(arms));
        } else if let Some(pin) = line.strip_prefix("gpio_export ") {
            stmts.push(Stmt::Export(pin.trim().parse().map_err(|_| unsupported())?));
        } else if let Some(secs) = line.strip_prefix("sleep ") {
            stmts.push(Stmt::Sleep(parse_seconds(secs.trim()).ok_or_else(unsupported)?));
        } else if let Some(rest) = line.strip_prefix("echo ") {
            let (value, target) = rest.split_once(" > ").ok_or_else(unsupported)?;
            let value = match unquote(value.trim()) {
                "$LEVEL" => Value::LevelVar,
                "1" => Value::Literal(Level::High),
                "0" => Value::Literal(Level::Low),
                _ => return Err(unsupported()),
            };
            let target = unquote(target.trim()).replace("$GPIO", SYSFS_GPIO);
            let pin = target
                .strip_prefix(&format!("{SYSFS_GPIO}/gpio"))
                .and_then(|r| r.strip_suffix("/value"))
                .and_then(|p| p.parse().ok())
                .ok_or_else(unsupported)?;
            stmts.push(Stmt::Write { pin, value });
        } else {
            return Err(unsupported());
        }
    }
    Ok(GpioProgram { stmts })
}

fn unquote(s: &str) -> &str {
    s.strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(s)
}

fn parse_arm(arm: &str) -> Option<(String, CaseAction)> {
    let body = arm.strip_suffix(";;")?.trim();
    let (pattern, action) = body.split_once(')')?;
    let action = action.trim();
    let action = if let Some(level) = action.strip_prefix("LEVEL=") {
        CaseAction::SetLevel(match level.trim() {
            "1" => Level::High,
            "0" => Level::Low,
            _ => return None,
        })
    } else {
        // `echo "msg" >&2; exit N`
        let (echo, exit) = action.split_once(';')?;
        let code = exit.trim().strip_prefix("exit ")?.trim().parse().ok()?;
        let message = echo
            .trim()
            .strip_prefix("echo ")?
            .trim_end_matches(">&2")
            .trim();
        CaseAction::Exit {
            code,
            message: unquote(message).to_string(),
        }
    };
    Some((pattern.trim().to_string(), action))
}

fn parse_seconds(s: &str) -> Option<u64> {
    let (whole, frac) = s.split_once('.').unwrap_or((s, ""));
    if whole.is_empty() && frac.is_empty() || frac.len() > 3 {
        return None;
    }
    let whole: u64 = if whole.is_empty() { 0 } else { whole.parse().ok()? };
    let frac_ms: u64 = if frac.is_empty() {
        0
    } else {
        format!("{frac:0<3}").parse().ok()?
    };
    Some(whole * 1000 + frac_ms)
}

impl GpioProgram {
    /// Evaluate with positional `args`, returning the timed pin writes.
    pub fn run(&self, args: &[String]) -> Result<Vec<ScriptWrite>, ScriptExit> {
        let arg = args.first().map(String::as_str).unwrap_or("");
        let mut level = None;
        let mut exported = BTreeSet::new();
        let mut at_ms = 0;
        let mut writes = Vec::new();
        for stmt in &self.stmts {
            match stmt {
                Stmt::Case(arms) => {
                    let hit = arms.iter().find(|(pat, _)| pat == arg || pat == "*");
                    match hit.map(|(_, a)| a) {
                        Some(CaseAction::SetLevel(l)) => level = Some(*l),
                        Some(CaseAction::Exit { code, message }) => {
                            return Err(ScriptExit {
                                code: *code,
                                stderr: message.clone(),
                            })
                        }
                        None => {}
                    }
                }
                Stmt::Export(pin) => {
                    exported.insert(*pin);
                }
                Stmt::Sleep(ms) => at_ms += ms,
                Stmt::Write { pin, value } => {
                    if !exported.contains(pin) {
                        return Err(ScriptExit {
                            code: 1,
                            stderr: format!("{SYSFS_GPIO}/gpio{pin}/value: No such file or directory"),
                        });
                    }
                    let level = match value {
                        Value::Literal(l) => *l,
                        Value::LevelVar => level.ok_or_else(|| ScriptExit {
                            code: 1,
                            stderr: "LEVEL is not set".into(),
                        })?,
                    };
                    writes.push(ScriptWrite {
                        at_ms,
                        pin: *pin,
                        level,
                    });
                }
            }
        }
        Ok(writes)
    }
}
