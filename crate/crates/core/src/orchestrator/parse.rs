use std::collections::BTreeMap;

use super::{Action, Playbook, PlaybookError, Task};

#[derive(Debug, Clone)]
struct Line {
    number: usize,
    indent: usize,
    text: String,
}

#[derive(Debug)]
enum Value {
    Empty,
    Scalar(String),
    /// `key: |` block; lines joined with `\n`, relative indentation kept.
    Literal(String),
    Block(Vec<Entry>),
}

#[derive(Debug)]
enum Entry {
    Item { line: usize, body: Vec<Entry> },
    Pair { line: usize, key: String, value: Value },
}

fn tokenize(source: &str) -> Result<Vec<Line>, PlaybookError> {
    let mut lines = Vec::new();
    for (idx, raw) in source.lines().enumerate() {
        let number = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed == "---" {
            continue;
        }
        let body = raw.trim_start_matches(' ');
        if body.starts_with('\t') {
            return Err(PlaybookError::MalformedIndentation { line: number });
        }
        lines.push(Line {
            number,
            indent: raw.len() - body.len(),
            text: body.trim_end().to_string(),
        });
    }
    Ok(lines)
}

struct Parser {
    lines: Vec<Line>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Line> {
        self.lines.get(self.pos)
    }

    fn block(&mut self, indent: usize) -> Result<Vec<Entry>, PlaybookError> {
        let mut out = Vec::new();
        while let Some(line) = self.peek() {
            if line.indent < indent {
                break;
            }
            if line.indent > indent {
                return Err(PlaybookError::MalformedIndentation { line: line.number });
            }
            let number = line.number;
            if line.text == "-" || line.text.starts_with("- ") {
                // `- key: v` becomes an item whose first line is `key: v`,
                // indented to where `key` starts.
                let after_dash = &line.text[1..];
                let rest = after_dash.trim_start();
                if rest.is_empty() {
                    return Err(PlaybookError::MalformedLine {
                        line: number,
                        text: line.text.clone(),
                    });
                }
                let inner = indent + 1 + (after_dash.len() - rest.len());
                let rest = rest.to_string();
                let slot = &mut self.lines[self.pos];
                slot.indent = inner;
                slot.text = rest;
                let body = self.block(inner)?;
                out.push(Entry::Item { line: number, body });
                continue;
            }
            let text = line.text.clone();
            self.pos += 1;
            let (key, raw_value) = text.split_once(':').ok_or_else(|| PlaybookError::MalformedLine {
                line: number,
                text: text.clone(),
            })?;
            let key = key.trim();
            if key.is_empty()
                || !key
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(PlaybookError::MalformedLine { line: number, text });
            }
            let raw_value = raw_value.trim();
            let value = if raw_value == "|" {
                self.literal(indent)
            } else if raw_value.is_empty() {
                match self.peek() {
                    Some(next) if next.indent > indent => {
                        if next.text.starts_with('|') {
                            self.piped(indent)
                        } else {
                            let child = next.indent;
                            Value::Block(self.block(child)?)
                        }
                    }
                    _ => Value::Empty,
                }
            } else {
                Value::Scalar(unquote(raw_value).to_string())
            };
            out.push(Entry::Pair {
                line: number,
                key: key.to_string(),
                value,
            });
        }
        Ok(out)
    }

    fn deeper_lines(&mut self, indent: usize) -> Vec<Line> {
        let mut taken = Vec::new();
        while let Some(line) = self.peek() {
            if line.indent <= indent {
                break;
            }
            taken.push(line.clone());
            self.pos += 1;
        }
        taken
    }

    fn literal(&mut self, indent: usize) -> Value {
        let lines = self.deeper_lines(indent);
        let Some(base) = lines.iter().map(|l| l.indent).min() else {
            return Value::Empty;
        };
        let text = lines
            .iter()
            .map(|l| format!("{}{}", " ".repeat(l.indent - base), l.text))
            .collect::<Vec<_>>()
            .join("\n");
        Value::Literal(text)
    }

    /// `key:` followed by more-indented `| text` lines.
    fn piped(&mut self, indent: usize) -> Value {
        let text = self
            .deeper_lines(indent)
            .iter()
            .map(|l| l.text.strip_prefix('|').unwrap_or(&l.text).trim().to_string())
            .collect::<Vec<_>>()
            .join("\n");
        Value::Literal(text)
    }
}

fn unquote(s: &str) -> &str {
    for q in ['"', '\''] {
        if s.len() >= 2 && s.starts_with(q) && s.ends_with(q) {
            return &s[1..s.len() - 1];
        }
    }
    s
}

/// Parse a playbook in the grammar documented on the module.
pub fn parse_playbook(source: &str) -> Result<Playbook, PlaybookError> {
    let mut parser = Parser {
        lines: tokenize(source)?,
        pos: 0,
    };
    let entries = parser.block(0)?;
    if let Some(line) = parser.peek() {
        return Err(PlaybookError::MalformedIndentation { line: line.number });
    }

    let play = match entries.first() {
        None => return Err(PlaybookError::MissingHosts),
        Some(Entry::Item { .. }) => {
            let mut items = entries.into_iter();
            let Some(Entry::Item { body, .. }) = items.next() else {
                unreachable!()
            };
            if let Some(extra) = items.next() {
                return Err(match extra {
                    Entry::Item { line, .. } => PlaybookError::MultiplePlays { line },
                    Entry::Pair { line, key, .. } => PlaybookError::MalformedLine {
                        line,
                        text: format!("{key}:"),
                    },
                });
            }
            body
        }
        Some(Entry::Pair { .. }) => entries,
    };
    play_from(play)
}

fn pairs(entries: Vec<Entry>) -> Result<Vec<(usize, String, Value)>, PlaybookError> {
    let mut seen = std::collections::HashSet::new();
    entries
        .into_iter()
        .map(|e| match e {
            Entry::Pair { line, key, value } => {
                if !seen.insert(key.clone()) {
                    return Err(PlaybookError::InvalidValue {
                        line,
                        key,
                        value: "duplicate key".into(),
                    });
                }
                Ok((line, key, value))
            }
            Entry::Item { line, .. } => Err(PlaybookError::MalformedLine {
                line,
                text: "unexpected list item".into(),
            }),
        })
        .collect()
}

fn scalar(line: usize, key: &str, value: Value) -> Result<String, PlaybookError> {
    match value {
        Value::Scalar(s) | Value::Literal(s) => Ok(s),
        Value::Empty => Ok(String::new()),
        Value::Block(_) => Err(PlaybookError::InvalidValue {
            line,
            key: key.to_string(),
            value: "nested block".into(),
        }),
    }
}

fn play_from(entries: Vec<Entry>) -> Result<Playbook, PlaybookError> {
    let mut hosts = None;
    let mut privileged = false;
    let mut vars = BTreeMap::new();
    let mut tasks = Vec::new();
    for (line, key, value) in pairs(entries)? {
        match key.as_str() {
            "hosts" => hosts = Some(scalar(line, &key, value)?),
            "become" => {
                let v = scalar(line, &key, value)?;
                privileged = match v.as_str() {
                    "yes" | "true" => true,
                    "no" | "false" => false,
                    _ => return Err(PlaybookError::InvalidValue { line, key, value: v }),
                };
            }
            "vars" => match value {
                Value::Empty => {}
                Value::Block(entries) => {
                    for (l, k, v) in pairs(entries)? {
                        let v = scalar(l, &k, v)?;
                        vars.insert(k, v);
                    }
                }
                _ => {
                    return Err(PlaybookError::InvalidValue {
                        line,
                        key,
                        value: "expected a block".into(),
                    })
                }
            },
            "tasks" => match value {
                Value::Empty => {}
                Value::Block(entries) => {
                    for e in entries {
                        match e {
                            Entry::Item { line, body } => tasks.push(task_from(line, body)?),
                            Entry::Pair { line, key, .. } => {
                                return Err(PlaybookError::MalformedLine {
                                    line,
                                    text: format!("{key}: (expected `- name: ...`)"),
                                })
                            }
                        }
                    }
                }
                _ => {
                    return Err(PlaybookError::InvalidValue {
                        line,
                        key,
                        value: "expected a task list".into(),
                    })
                }
            },
            _ => return Err(PlaybookError::UnknownKey { line, key }),
        }
    }
    let hosts = hosts
        .filter(|h| !h.trim().is_empty())
        .ok_or(PlaybookError::MissingHosts)?;
    if tasks.is_empty() {
        return Err(PlaybookError::EmptyTasks);
    }
    Ok(Playbook {
        hosts,
        privileged,
        vars,
        tasks,
    })
}

fn fields<const N: usize>(
    line: usize,
    value: Value,
    names: [&'static str; N],
) -> Result<[String; N], PlaybookError> {
    let Value::Block(entries) = value else {
        return Err(PlaybookError::MissingField {
            line,
            field: names[0],
        });
    };
    let mut found: [Option<String>; N] = std::array::from_fn(|_| None);
    for (l, k, v) in pairs(entries)? {
        let Some(i) = names.iter().position(|n| *n == k) else {
            return Err(PlaybookError::UnknownKey { line: l, key: k });
        };
        found[i] = Some(scalar(l, &k, v)?);
    }
    let mut out: [String; N] = std::array::from_fn(|_| String::new());
    for (i, slot) in found.into_iter().enumerate() {
        out[i] = slot
            .filter(|s| !s.is_empty())
            .ok_or(PlaybookError::MissingField {
                line,
                field: names[i],
            })?;
    }
    Ok(out)
}

fn is_unit_name(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | '@'))
}

fn task_from(item_line: usize, body: Vec<Entry>) -> Result<Task, PlaybookError> {
    let mut name = None;
    let mut action = None;
    for (line, key, value) in pairs(body)? {
        let parsed = match key.as_str() {
            "name" => {
                name = Some(scalar(line, &key, value)?);
                continue;
            }
            "copy" => {
                let [src, dest] = fields(line, value, ["src", "dest"])?;
                Action::CopyFile { src, dest }
            }
            "shell" => {
                let command = scalar(line, &key, value)?;
                if command.trim().is_empty() {
                    return Err(PlaybookError::MissingField { line, field: "shell" });
                }
                Action::Shell { command }
            }
            "service" => {
                let [unit, exec, log] = fields(line, value, ["unit", "exec", "log"])?;
                if !is_unit_name(&unit) {
                    return Err(PlaybookError::InvalidValue {
                        line,
                        key: "unit".into(),
                        value: unit,
                    });
                }
                Action::ServiceInstall { unit, exec, log }
            }
            _ => return Err(PlaybookError::UnknownActionKind { line, kind: key }),
        };
        if action.is_some() {
            return Err(PlaybookError::MultipleActions { line });
        }
        action = Some(parsed);
    }
    let action = action.ok_or(PlaybookError::MissingAction { line: item_line })?;
    let name = name.unwrap_or_else(|| {
        match &action {
            Action::CopyFile { .. } => "copy",
            Action::Shell { .. } => "shell",
            Action::ServiceInstall { .. } => "service",
        }
        .to_string()
    });
    Ok(Task { name, action })
}
