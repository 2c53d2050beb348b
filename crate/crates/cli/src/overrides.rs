//! Optional TOML config files. Flags win over file values, file values
//! win over built-in defaults.

use anyhow::{bail, Context, Result};
use std::path::Path;

#[derive(Default)]
pub struct Overrides {
    table: Option<toml::Table>,
}

impl Overrides {
    pub fn load(path: Option<&Path>) -> Result<Overrides> {
        let Some(path) = path else {
            return Ok(Overrides::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let table: toml::Table = text
            .parse()
            .with_context(|| format!("parsing config file {}", path.display()))?;
        Ok(Overrides { table: Some(table) })
    }

    fn get(&self, key: &str) -> Option<&toml::Value> {
        self.table.as_ref().and_then(|t| t.get(key))
    }

    /// flag > config file > default
    pub fn u64(&self, key: &str, flag: Option<u64>, default: u64) -> Result<u64> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.get(key) {
            Some(toml::Value::Integer(i)) if *i >= 0 => Ok(*i as u64),
            Some(other) => bail!("config key {key} must be a non-negative integer, found {other}"),
            None => Ok(default),
        }
    }

    pub fn usize(&self, key: &str, flag: Option<usize>, default: usize) -> Result<usize> {
        Ok(self.u64(key, flag.map(|v| v as u64), default as u64)? as usize)
    }

    pub fn f64(&self, key: &str, flag: Option<f64>, default: f64) -> Result<f64> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.get(key) {
            Some(toml::Value::Float(f)) => Ok(*f),
            Some(toml::Value::Integer(i)) => Ok(*i as f64),
            Some(other) => bail!("config key {key} must be a number, found {other}"),
            None => Ok(default),
        }
    }

    pub fn string(&self, key: &str, flag: Option<String>, default: &str) -> Result<String> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.get(key) {
            Some(toml::Value::String(s)) => Ok(s.clone()),
            Some(other) => bail!("config key {key} must be a string, found {other}"),
            None => Ok(default.to_string()),
        }
    }
}
