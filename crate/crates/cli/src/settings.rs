//! Run configuration: one TOML table, overridden by flags and `--set` pairs.
//!
//! Keys are dotted paths (`train.lr`). Every value a run actually uses ends up
//! in the table, defaults included, so the manifest snapshot is complete.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

#[derive(Clone, Debug, Default)]
pub struct Settings {
    table: Table,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let table = text.parse::<Table>().with_context(|| format!("parsing config {}", path.display()))?;
        Ok(Self { table })
    }

    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| anyhow!("empty config key"))?;
        let mut t = &mut self.table;
        for p in parts {
            let entry = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
            t = entry.as_table_mut().ok_or_else(|| anyhow!("config key `{key}`: `{p}` is not a table"))?;
        }
        t.insert(last.to_string(), value);
        Ok(())
    }

    /// Applies a `key=value` pair. The value is read as a TOML value, falling
    /// back to a plain string.
    pub fn assign(&mut self, pair: &str) -> Result<()> {
        let (key, raw) = pair.split_once('=').ok_or_else(|| anyhow!("expected KEY=VALUE, got `{pair}`"))?;
        let value = format!("v = {raw}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        self.set(key.trim(), value)
    }

    fn lookup(&self, key: &str) -> Option<&Value> {
        let mut parts = key.split('.');
        let mut v = self.table.get(parts.next()?)?;
        for p in parts {
            v = v.as_table()?.get(p)?;
        }
        Some(v)
    }

    pub fn has(&self, key: &str) -> bool {
        self.lookup(key).is_some()
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.lookup(key).ok_or_else(|| anyhow!("missing config key `{key}`"))?;
        v.clone().try_into().map_err(|e| anyhow!("config key `{key}`: {e}"))
    }

    pub fn get_opt<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        if self.has(key) {
            self.get(key).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn get_or<T: Serialize + DeserializeOwned>(&mut self, key: &str, default: T) -> Result<T> {
        if !self.has(key) {
            self.set(key, Value::try_from(&default)?)?;
        }
        self.get(key)
    }

    /// Reads table `key` on top of `default`: keys present in the config
    /// replace the default's fields, unknown keys are rejected.
    pub fn section<T: Serialize + DeserializeOwned>(&mut self, key: &str, default: T) -> Result<T> {
        let mut merged = match Value::try_from(&default)? {
            Value::Table(t) => t,
            _ => bail!("config section `{key}` is not a table"),
        };
        let given = match self.lookup(key) {
            None => Table::new(),
            Some(Value::Table(t)) => t.clone(),
            Some(_) => bail!("config key `{key}` must be a table"),
        };
        merged.extend(given.clone());
        let value: T = Value::Table(merged).try_into().map_err(|e| anyhow!("config section `{key}`: {e}"))?;
        let Value::Table(effective) = Value::try_from(&value)? else { unreachable!() };
        if let Some(extra) = given.keys().find(|k| !effective.contains_key(*k)) {
            bail!("unknown config key `{key}.{extra}`");
        }
        self.set(key, Value::Table(effective))?;
        Ok(value)
    }

    pub fn snapshot(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(&self.table)?)
    }
}
