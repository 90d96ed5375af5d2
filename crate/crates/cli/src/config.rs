// Flat `key = value` configuration with command-line overrides.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

pub const SEED_ENV: &str = "LETHE_SEED";

/// Keys understood by every command that touches a model.
pub const ARCH_KEYS: [&str; 5] = ["patch_size", "depth", "heads", "dim", "mlp_ratio"];

pub struct Config {
    values: BTreeMap<String, String>,
    resolved: RefCell<BTreeMap<String, String>>,
}

impl Config {
    /// Reads `path` if given, then applies `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = split_pair(line)
                    .ok_or_else(|| CliError::Usage(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
                values.insert(k, v);
            }
        }
        for item in overrides {
            let (k, v) = split_pair(item)
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {item:?}")))?;
            values.insert(k, v);
        }
        Ok(Config {
            values,
            resolved: RefCell::new(BTreeMap::new()),
        })
    }

    /// Rejects keys outside `allowed` so typos do not silently fall back to
    /// defaults.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), CliError> {
        match self.values.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(CliError::Usage(format!(
                "unknown config key '{k}'; accepted keys: {}",
                allowed.join(", ")
            ))),
            None => Ok(()),
        }
    }

    fn parse<T: FromStr>(&self, key: &str, raw: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let value = raw
            .parse()
            .map_err(|e| CliError::Usage(format!("config key '{key}': cannot parse {raw:?}: {e}")))?;
        self.resolved.borrow_mut().insert(key.to_string(), raw.to_string());
        Ok(value)
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        match self.values.get(key) {
            Some(raw) => self.parse(key, raw),
            None => Err(CliError::Usage(format!("missing config key '{key}'"))),
        }
    }

    pub fn get_or<T: FromStr + Display>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        match self.values.get(key) {
            Some(raw) => self.parse(key, raw),
            None => {
                self.resolved.borrow_mut().insert(key.to_string(), default.to_string());
                Ok(default)
            }
        }
    }

    /// Comma-separated list, e.g. `ratios = 0,0.05,0.1`.
    pub fn list_or<T: FromStr>(&self, key: &str, default: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: Display,
    {
        let raw = self.values.get(key).map_or(default, String::as_str);
        self.resolved.borrow_mut().insert(key.to_string(), raw.to_string());
        raw.split(',')
            .map(|item| {
                let item = item.trim();
                item.parse()
                    .map_err(|e| CliError::Usage(format!("config key '{key}': cannot parse {item:?}: {e}")))
            })
            .collect()
    }

    /// The `seed` key, falling back to `LETHE_SEED`.
    pub fn seed(&self) -> Result<u64, CliError> {
        if self.values.contains_key("seed") {
            return self.require("seed");
        }
        match std::env::var(SEED_ENV) {
            Ok(raw) => self.parse("seed", &raw),
            Err(_) => Err(CliError::Usage(format!("missing config key 'seed' (and {SEED_ENV} is not set)"))),
        }
    }

    /// Every value read so far, defaults included.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        self.resolved.borrow().clone()
    }
}

fn split_pair(line: &str) -> Option<(String, String)> {
    let (k, v) = line.split_once('=')?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return None;
    }
    Some((k.to_string(), v.to_string()))
}
