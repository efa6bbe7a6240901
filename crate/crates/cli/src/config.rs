//! Plain-text run configuration.
//!
//! One `key = value` pair per line, `#` starts a comment. Keys are the long
//! flag names of the subcommand without the leading dashes (`lambda`,
//! `batch-size`, ...). Values given on the command line win over the file.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Command;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits a config file into entries without interpreting the values.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            bail!("line {line}: expected `key = value`, got `{content}`");
        };
        let (key, value) = (k.trim(), v.trim());
        if key.is_empty() || value.is_empty() {
            bail!("line {line}: expected `key = value`, got `{content}`");
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            bail!("line {line}: `{key}` already set on line {}", prev.line);
        }
        out.push(Entry {
            line,
            key: key.to_string(),
            value: value.to_string(),
        });
    }
    Ok(out)
}

/// Checks every entry against the subcommand's flags and returns them as
/// command-line arguments, to be placed before the user's own arguments.
pub fn entries_to_args(entries: &[Entry], sub: &Command) -> Result<Vec<String>> {
    let mut args = Vec::new();
    for e in entries {
        let known = sub
            .get_arguments()
            .any(|a| a.get_long() == Some(e.key.as_str()) && e.key != "config");
        if !known {
            bail!("line {}: unknown key `{}`", e.line, e.key);
        }
        let flag = format!("--{}", e.key);
        // Validate the value with the flag's own parser.
        sub.clone()
            .no_binary_name(true)
            .try_get_matches_from([flag.as_str(), e.value.as_str()])
            .map_err(|err| {
                let msg = err.to_string();
                let first = msg.lines().next().unwrap_or("invalid value").to_string();
                anyhow::anyhow!("line {}: bad value for `{}`: {}", e.line, e.key, first.trim_start_matches("error: "))
            })?;
        args.push(flag);
        args.push(e.value.clone());
    }
    Ok(args)
}

pub fn load(path: &Path, sub: &Command) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let entries = parse_entries(&text).with_context(|| format!("in config {}", path.display()))?;
    entries_to_args(&entries, sub).with_context(|| format!("in config {}", path.display()))
}
