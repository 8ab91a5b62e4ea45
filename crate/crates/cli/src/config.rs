//! Config-file merging. Values from the TOML file become ordinary flags placed
//! ahead of the user's own, so the command line wins on conflicts.

use std::path::Path;

use clap::CommandFactory;
use toml::{Table, Value};

use crate::args::Cli;

/// Accepted long flags of a subcommand, with whether each takes a value.
fn flags_of(subcommand: &str) -> Vec<(String, bool)> {
    Cli::command()
        .find_subcommand(subcommand)
        .map(|c| {
            c.get_arguments()
                .filter_map(|a| {
                    a.get_long()
                        .map(|l| (l.to_string(), a.get_action().takes_values()))
                })
                .collect()
        })
        .unwrap_or_default()
}

fn subcommand_names() -> Vec<String> {
    Cli::command()
        .get_subcommands()
        .map(|c| c.get_name().to_string())
        .collect()
}

fn scalar(key: &str, v: &Value) -> Result<String, String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Integer(i) => Ok(i.to_string()),
        Value::Float(f) => Ok(f.to_string()),
        Value::Boolean(b) => Ok(b.to_string()),
        other => Err(format!("config key `{key}`: unsupported value {other}")),
    }
}

fn to_tokens(key: &str, flag: &str, takes_value: bool, v: &Value) -> Result<Vec<String>, String> {
    let long = format!("--{flag}");
    if !takes_value {
        return match v {
            Value::Boolean(true) => Ok(vec![long]),
            Value::Boolean(false) => Ok(vec![]),
            _ => Err(format!(
                "config key `{key}` is a switch and needs true or false"
            )),
        };
    }
    match v {
        Value::Array(items) => {
            let mut out = vec![long];
            for item in items {
                out.push(scalar(key, item)?);
            }
            Ok(out)
        }
        v => Ok(vec![long, scalar(key, v)?]),
    }
}

fn config_path(argv: &[String]) -> Option<String> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

/// Position of the subcommand token in `argv`, skipping the `--config` value.
fn subcommand_index(argv: &[String], names: &[String]) -> Option<usize> {
    let mut skip_next = false;
    for (i, a) in argv.iter().enumerate().skip(1) {
        if skip_next {
            skip_next = false;
            continue;
        }
        if a == "--config" {
            skip_next = true;
            continue;
        }
        if names.iter().any(|n| n == a) {
            return Some(i);
        }
        if !a.starts_with('-') {
            return None;
        }
    }
    None
}

/// Returns `argv` with the config file's flags spliced in after the
/// subcommand. Unknown keys are errors.
pub fn expand(argv: Vec<String>) -> Result<Vec<String>, String> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let names = subcommand_names();
    let Some(at) = subcommand_index(&argv, &names) else {
        return Ok(argv);
    };
    let sub = argv[at].clone();
    let body = std::fs::read_to_string(Path::new(&path))
        .map_err(|e| format!("config file {path}: {e}"))?;
    let table: Table = body
        .parse()
        .map_err(|e| format!("config file {path}: {e}"))?;

    let accepted = flags_of(&sub);
    let lookup = |key: &str| {
        let flag = key.replace('_', "-");
        accepted
            .iter()
            .find(|(l, _)| *l == flag)
            .map(|(l, v)| (l.clone(), *v))
    };
    let known_anywhere = |key: &str| {
        let flag = key.replace('_', "-");
        names
            .iter()
            .any(|n| flags_of(n).iter().any(|(l, _)| *l == flag))
    };

    let mut shared = Vec::new();
    let mut specific = Vec::new();
    for (key, value) in &table {
        if let Value::Table(section) = value {
            let name = key.replace('_', "-");
            if !names.contains(&name) {
                return Err(format!("config file {path}: unknown section [{key}]"));
            }
            if name != sub {
                continue;
            }
            for (k, v) in section {
                let (flag, takes) = lookup(k)
                    .ok_or_else(|| format!("config file {path}: `{sub}` has no option `{k}`"))?;
                specific.extend(to_tokens(k, &flag, takes, v)?);
            }
        } else if let Some((flag, takes)) = lookup(key) {
            shared.extend(to_tokens(key, &flag, takes, value)?);
        } else if !known_anywhere(key) {
            return Err(format!("config file {path}: unknown option `{key}`"));
        }
    }

    let mut out: Vec<String> = argv[..=at].to_vec();
    out.extend(shared);
    out.extend(specific);
    out.extend(argv[at + 1..].iter().cloned());
    Ok(out)
}
