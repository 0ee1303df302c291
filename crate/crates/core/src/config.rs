//! Flat `key=value` configuration.
//!
//! Keys are dotted paths into the serialized config (`rl.clip_eps`,
//! `schedule.p_start`, `task_config.spell_backward.max_word_len`) plus a few
//! short aliases. Unknown keys are rejected.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CbrlError, Result};

const ALIASES: &[(&str, &str)] = &[
    ("seed", "master_seed"),
    ("p_start", "schedule.p_start"),
    ("p_end", "schedule.p_end"),
    ("T", "schedule.total_steps"),
    ("total_steps", "schedule.total_steps"),
    ("m", "batch_size"),
    ("n", "rl.group_size"),
    ("group_size", "rl.group_size"),
    ("k", "k_examples"),
    ("algorithm", "rl.algorithm"),
    ("lr", "rl.lr"),
    ("temperature", "sampling.temperature"),
    ("top_p", "sampling.top_p"),
    ("max_new_tokens", "sampling.max_new_tokens"),
];

pub fn resolve(key: &str) -> &str {
    ALIASES
        .iter()
        .find(|(a, _)| *a == key)
        .map(|(_, full)| *full)
        .unwrap_or(key)
}

/// Splits `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_lines(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CbrlError::Parse {
            location: format!("{origin}:{}", i + 1),
            reason: format!("expected key=value, got {line:?}"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CbrlError::config(format!("expected key=value, got {s:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn coerce(key: &str, current: &Value, raw: &str) -> Result<Value> {
    let bad = |what: &str| CbrlError::config(format!("{key}: {raw:?} is not {what}"));
    Ok(match current {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("a boolean"))?),
        Value::Number(n) if n.is_u64() => match raw.parse::<u64>() {
            Ok(v) => Value::from(v),
            Err(_) => return Err(bad("a non-negative integer")),
        },
        Value::Number(n) if n.is_i64() => Value::from(raw.parse::<i64>().map_err(|_| bad("an integer"))?),
        Value::Number(_) => {
            let v: f64 = raw.parse().map_err(|_| bad("a number"))?;
            serde_json::Number::from_f64(v)
                .map(Value::Number)
                .ok_or_else(|| bad("a finite number"))?
        }
        Value::Null if raw.is_empty() || raw == "none" => Value::Null,
        Value::Null | Value::String(_) => Value::String(unescape(raw)),
        Value::Array(items) => {
            let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
            let proto = items.first().cloned().unwrap_or(Value::String(String::new()));
            Value::Array(
                parts
                    .iter()
                    .map(|p| coerce(key, &proto, p))
                    .collect::<Result<_>>()?,
            )
        }
        Value::Object(_) => return Err(CbrlError::config(format!("{key} is a section, not a value"))),
    })
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

fn slot<'a>(root: &'a mut Value, path: &str) -> Option<&'a mut Value> {
    let mut cur = root;
    for part in path.split('.') {
        cur = cur.as_object_mut()?.get_mut(part)?;
    }
    Some(cur)
}

/// Applies assignments on top of `base`. Every key must name an existing
/// field; values take the type of the field they replace.
pub fn apply<T: Serialize + DeserializeOwned>(base: &T, assignments: &[(String, String)]) -> Result<T> {
    let mut root = serde_json::to_value(base)?;
    for (key, raw) in assignments {
        let path = resolve(key);
        let target = slot(&mut root, path).ok_or_else(|| CbrlError::config(format!("unknown key {key:?}")))?;
        *target = coerce(key, target, raw)?;
    }
    serde_json::from_value(root).map_err(|e| CbrlError::config(e.to_string()))
}

pub fn load_file<T: Serialize + DeserializeOwned>(base: &T, path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    apply(base, &parse_lines(&text, &path.display().to_string())?)
}

/// Every settable key with its current value, one `key=value` per line.
pub fn render<T: Serialize>(cfg: &T) -> Result<String> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Object(m) => walk_map(prefix, m, out),
            Value::Null => out.push(format!("{prefix}=none")),
            Value::String(s) => out.push(format!("{prefix}={}", escape(s))),
            Value::Array(a) => out.push(format!(
                "{prefix}={}",
                a.iter()
                    .map(|x| match x {
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join(",")
            )),
            other => out.push(format!("{prefix}={other}")),
        }
    }
    fn walk_map(prefix: &str, m: &Map<String, Value>, out: &mut Vec<String>) {
        for (k, v) in m {
            let key = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            walk(&key, v, out);
        }
    }
    let mut out = Vec::new();
    walk("", &serde_json::to_value(cfg)?, &mut out);
    Ok(out.join("\n") + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::TrainConfig;

    #[test]
    fn aliases_and_paths() {
        let cfg = apply(
            &TrainConfig::default(),
            &[
                ("p_start".into(), "0.25".into()),
                ("rl.algorithm".into(), "rloo".into()),
                ("T".into(), "50".into()),
                ("task_config.spell_backward.max_word_len".into(), "5".into()),
                ("bank_path".into(), "/tmp/b.jsonl".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.schedule.p_start, 0.25);
        assert_eq!(cfg.schedule.total_steps, 50);
        assert_eq!(cfg.rl.algorithm, crate::rl::Algorithm::Rloo);
        assert_eq!(cfg.task_config.spell_backward.max_word_len, 5);
        assert_eq!(cfg.bank_path.as_deref(), Some(Path::new("/tmp/b.jsonl")));
    }

    #[test]
    fn unknown_and_mistyped_keys_fail() {
        let base = TrainConfig::default();
        assert!(apply(&base, &[("p_strat".into(), "0.1".into())]).is_err());
        assert!(apply(&base, &[("batch_size".into(), "-3".into())]).is_err());
        assert!(apply(&base, &[("rl".into(), "1".into())]).is_err());
        assert!(apply(&base, &[("rl.algorithm".into(), "ppo".into())]).is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.master_seed = 9;
        cfg.schedule.p_start = 0.7;
        let text = render(&cfg).unwrap();
        let back: TrainConfig = apply(&TrainConfig::default(), &parse_lines(&text, "t").unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
