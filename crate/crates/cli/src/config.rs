//! `key = value` run configuration. Command-line flags override file values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use akhcrnet_core::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

fn normalize_key(k: &str) -> String {
    k.trim().replace('-', "_")
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`", n + 1)))?;
            values.insert(normalize_key(k), v.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses `key` if present.
    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("config value for {key} is invalid: `{v}`"))),
        }
    }

    /// Rejects keys the command does not understand.
    pub fn check_keys(&self, known: &[&str]) -> Result<()> {
        match self.values.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!("unknown config key {k}"))),
            None => Ok(()),
        }
    }
}

/// Flag value, else config-file value, else default.
pub fn resolve<T: std::str::FromStr>(flag: Option<T>, file: &ConfigFile, key: &str, default: T) -> Result<T> {
    Ok(match flag {
        Some(v) => v,
        None => file.get(key)?.unwrap_or(default),
    })
}

/// Effective settings as written to `run_config.txt`, in insertion order.
#[derive(Debug, Clone, Default)]
pub struct EffectiveConfig {
    entries: Vec<(String, String)>,
}

impl EffectiveConfig {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("run_config.txt");
        fs::write(&path, self.render()).map_err(|e| Error::io(&path, e))
    }
}
