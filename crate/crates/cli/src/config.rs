//! `--config` files: one `key=value` per line, `#` starts a comment. Keys are
//! long flag names of the chosen subcommand. The pairs are spliced into the
//! argument list ahead of the user's own flags, so anything given on the
//! command line wins.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::Command;

use crate::CliError;

/// Finds the value of `--config` anywhere in `args`.
fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

/// Position of the subcommand name, skipping `--config` and its value.
fn subcommand_index(args: &[OsString], cmd: &Command) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let s = args[i].to_string_lossy();
        if s == "--config" {
            i += 2;
            continue;
        }
        if !s.starts_with('-') && cmd.find_subcommand(s.as_ref()).is_some() {
            return Some(i);
        }
        i += 1;
    }
    None
}

fn parse_pairs(path: &Path, text: &str, sub: &Command) -> Result<Vec<OsString>, CliError> {
    let err = |line: usize, message: String| CliError::Config {
        path: path.to_path_buf(),
        message: format!("line {line}: {message}"),
    };
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(n + 1, format!("expected key=value, got {line:?}")))?;
        let key = key.trim().trim_start_matches("--");
        let value = value.trim();
        if key == "config" {
            return Err(err(n + 1, "config files cannot include other config files".into()));
        }
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key))
            .ok_or_else(|| err(n + 1, format!("unknown key {key:?} for `{}`", sub.get_name())))?;
        if arg.get_action().takes_values() {
            out.push(OsString::from(format!("--{key}={value}")));
        } else {
            match value {
                "true" | "1" | "yes" => out.push(OsString::from(format!("--{key}"))),
                "false" | "0" | "no" => {}
                other => return Err(err(n + 1, format!("flag {key:?} expects true or false, got {other:?}"))),
            }
        }
    }
    Ok(out)
}

/// Returns `args` with the config file's pairs inserted right after the
/// subcommand name. Without `--config` the arguments pass through unchanged.
pub fn expand(args: Vec<OsString>, cmd: &Command) -> Result<Vec<OsString>, CliError> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let Some(at) = subcommand_index(&args, cmd) else {
        return Ok(args);
    };
    let name = args[at].to_string_lossy().into_owned();
    let sub = cmd.find_subcommand(&name).expect("checked by subcommand_index");
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Config {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let pairs = parse_pairs(&path, &text, sub)?;
    let mut out = args[..=at].to_vec();
    out.extend(pairs);
    out.extend_from_slice(&args[at + 1..]);
    Ok(out)
}
