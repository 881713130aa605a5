//! `--config file.json` support.
//!
//! The file holds an object whose keys are the command's long flag names.
//! Its entries are spliced into the argument list right after the subcommand,
//! ahead of the real flags, and every subcommand lets a later occurrence of a
//! flag override an earlier one. So flags on the command line win, and file
//! values go through exactly the same parsing and validation as flags.

use std::ffi::OsString;
use std::path::Path;

use serde_json::Value;

use crate::error::{CliError, CliResult};

fn config_path(args: &[OsString]) -> CliResult<Option<OsString>> {
    let mut found = None;
    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        let text = arg.to_string_lossy();
        if text == "--config" {
            let value = iter.next().ok_or_else(|| CliError::usage("--config needs a file path"))?;
            found = Some(value.clone());
        } else if let Some(v) = text.strip_prefix("--config=") {
            found = Some(OsString::from(v));
        }
    }
    Ok(found)
}

fn scalar(key: &str, v: &Value) -> CliResult<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        _ => Err(CliError::usage(format!("config key '{key}' must be a string, number, boolean or list"))),
    }
}

/// Flag arguments equivalent to a config object.
pub fn config_args(text: &str) -> CliResult<Vec<OsString>> {
    let value: Value = serde_json::from_str(text).map_err(|e| CliError::usage(format!("config file: {e}")))?;
    let Value::Object(map) = value else {
        return Err(CliError::usage("config file must hold a JSON object"));
    };
    let mut out = Vec::new();
    for (key, v) in &map {
        if key == "config" {
            return Err(CliError::usage("config files cannot include other config files"));
        }
        let flag = OsString::from(format!("--{key}"));
        match v {
            Value::Null | Value::Bool(false) => {}
            Value::Bool(true) => out.push(flag),
            Value::Array(items) => {
                let parts = items.iter().map(|i| scalar(key, i)).collect::<CliResult<Vec<_>>>()?;
                out.push(flag);
                out.push(parts.join(",").into());
            }
            other => {
                out.push(flag);
                out.push(scalar(key, other)?.into());
            }
        }
    }
    Ok(out)
}

/// Returns `args` with the config file's flags inserted after the subcommand.
pub fn expand(args: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let Some(path) = config_path(&args)? else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(Path::new(&path))
        .map_err(|e| CliError::data(format!("cannot read config {}: {e}", path.to_string_lossy())))?;
    let extra = config_args(&text)?;
    // the subcommand is the first argument after the program name that is not a flag
    let at = args.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')).map_or(args.len(), |p| p + 2);
    let mut out = args[..at.min(args.len())].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[at.min(args.len())..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: Vec<OsString>) -> Vec<String> {
        v.into_iter().map(|s| s.into_string().unwrap()).collect()
    }

    #[test]
    fn object_becomes_flags() {
        let args = config_args(
            r#"{"lr": 0.01, "deterministic": true, "one-based": false, "splits": ["4/16", "10/10"], "seed": 3}"#,
        )
        .unwrap();
        let args = strings(args);
        assert!(args.windows(2).any(|w| w == ["--lr", "0.01"]));
        assert!(args.windows(2).any(|w| w == ["--splits", "4/16,10/10"]));
        assert!(args.windows(2).any(|w| w == ["--seed", "3"]));
        assert!(args.contains(&"--deterministic".to_string()));
        assert!(!args.contains(&"--one-based".to_string()));
    }

    #[test]
    fn rejects_non_objects_and_nesting() {
        assert!(config_args("[1, 2]").is_err());
        assert!(config_args(r#"{"config": "other.json"}"#).is_err());
        assert!(config_args(r#"{"lr": {"a": 1}}"#).is_err());
    }

    #[test]
    fn no_config_leaves_args_alone() {
        let args: Vec<OsString> = ["julia", "train", "--seed", "1"].iter().map(OsString::from).collect();
        assert_eq!(expand(args.clone()).unwrap(), args);
    }
}
