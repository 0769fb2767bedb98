//! Config loading: strict TOML with typed keys, unknown keys rejected, plus
//! `--set key=value` overrides that must reference existing keys.

use std::path::Path;

use feddle_core::ExperimentConfig;
use toml::Value;

use crate::errors::{CliError, CliResult};

/// Reads, parses, overrides and validates an experiment configuration.
pub fn load_config(path: &Path, overrides: &[String]) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Parse(format!("cannot read {}: {e}", path.display())))?;
    let config: ExperimentConfig =
        toml::from_str(&text).map_err(|e| CliError::Parse(e.to_string()))?;

    let config = if overrides.is_empty() {
        config
    } else {
        let mut table = toml::Table::try_from(&config)
            .map_err(|e| CliError::Parse(format!("cannot resolve config: {e}")))?;
        for raw in overrides {
            apply_override(&mut table, raw)?;
        }
        table
            .try_into()
            .map_err(|e| CliError::Parse(format!("override produced an invalid config: {e}")))?
    };

    config
        .validate()
        .map_err(|e| CliError::Invariant(e.to_string()))?;
    Ok(config)
}

/// Applies `key=value`. Dotted keys address `section.key`; bare keys must
/// match exactly one existing key anywhere in the config.
fn apply_override(table: &mut toml::Table, raw: &str) -> CliResult<()> {
    let (key, value_text) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {raw:?} is not of the form key=value")))?;
    let key = key.trim();
    let value = parse_value(value_text.trim());

    let path: Vec<String> = if key.contains('.') {
        key.split('.').map(str::to_string).collect()
    } else {
        resolve_bare_key(table, key)?
    };

    let mut cursor: &mut Value = table
        .get_mut(&path[0])
        .ok_or_else(|| CliError::Usage(format!("unknown config key {key:?}")))?;
    for segment in &path[1..] {
        cursor = cursor
            .as_table_mut()
            .and_then(|t| t.get_mut(segment))
            .ok_or_else(|| CliError::Usage(format!("unknown config key {key:?}")))?;
    }
    if cursor.is_table() {
        return Err(CliError::Usage(format!(
            "config key {key:?} names a section, not a value"
        )));
    }
    *cursor = value;
    Ok(())
}

/// Finds the unique `section.key` (or top-level key) with this name.
fn resolve_bare_key(table: &toml::Table, key: &str) -> CliResult<Vec<String>> {
    let mut matches: Vec<Vec<String>> = Vec::new();
    for (section, value) in table {
        if section == key && !value.is_table() {
            matches.push(vec![section.clone()]);
        }
        if let Some(inner) = value.as_table() {
            for inner_key in inner.keys() {
                if inner_key == key {
                    matches.push(vec![section.clone(), inner_key.clone()]);
                }
            }
        }
    }
    match matches.len() {
        0 => Err(CliError::Usage(format!("unknown config key {key:?}"))),
        1 => Ok(matches.pop().expect("one match")),
        _ => {
            let paths: Vec<String> = matches.iter().map(|p| p.join(".")).collect();
            Err(CliError::Usage(format!(
                "config key {key:?} is ambiguous: {}",
                paths.join(", ")
            )))
        }
    }
}

/// Values parse as TOML where possible; anything else is a bare string, so
/// `--set activation=tanh` needs no quoting.
fn parse_value(text: &str) -> Value {
    let wrapped = format!("v = {text}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v exists"),
        Err(_) => Value::String(text.to_string()),
    }
}
