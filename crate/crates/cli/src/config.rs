//! Flat `key = value` config files.
//!
//! Each key names a long flag of the chosen subcommand (`kappa_max` and
//! `kappa-max` are the same key). Values are spliced into the argument list
//! right after the subcommand, so flags given on the command line override
//! them. `true` turns a switch on, `false` leaves it off.

use std::ffi::OsString;
use std::path::Path;

const GLOBAL_VALUE_FLAGS: [&str; 2] = ["--threads", "--config"];

pub fn parse(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value, got {line:?}", k + 1))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() {
            return Err(format!("line {}: empty key", k + 1));
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

fn subcommand_position(args: &[OsString]) -> Option<usize> {
    let mut k = 1;
    while k < args.len() {
        let s = args[k].to_string_lossy();
        if GLOBAL_VALUE_FLAGS.contains(&s.as_ref()) {
            k += 2;
        } else if s.starts_with('-') {
            k += 1;
        } else {
            return Some(k);
        }
    }
    None
}

/// Returns `args` with the config file's entries spliced in.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).map_err(|e| format!("config file {}: {e}", path.display()))?;
    let entries = parse(&text).map_err(|e| format!("config file {}: {e}", path.display()))?;
    let Some(at) = subcommand_position(&args) else {
        return Ok(args);
    };
    let mut injected = Vec::new();
    for (key, value) in entries {
        match value.as_str() {
            "true" => injected.push(format!("--{key}").into()),
            "false" => {}
            _ => {
                injected.push(format!("--{key}").into());
                injected.push(value.into());
            }
        }
    }
    let mut out = args;
    out.splice(at + 1..at + 1, injected);
    Ok(out)
}
