//! Flat `key = value` configuration text.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! skipped. Keys are kept sorted so serialisation is canonical. Environment
//! variables named `OMNI_<KEY>` (upper case, `.` and `-` written as `_`)
//! override file values via [`KvConfig::apply_env`].

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "OMNI_";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            values.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values from `other` replace ours.
    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.values {
            self.values.insert(k.clone(), v.clone());
        }
    }

    /// Keys under `prefix.` with the prefix stripped.
    pub fn section(&self, prefix: &str) -> KvConfig {
        let p = format!("{prefix}.");
        KvConfig {
            values: self
                .values
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn with_prefix(&self, prefix: &str) -> KvConfig {
        KvConfig {
            values: self.values.iter().map(|(k, v)| (format!("{prefix}.{k}"), v.clone())).collect(),
        }
    }

    /// Overrides known keys from `OMNI_*` variables supplied by `vars`.
    pub fn apply_env_from<I>(&mut self, known: &[&str], vars: I)
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let by_env: BTreeMap<String, &str> = known.iter().map(|k| (env_name(k), *k)).collect();
        for (name, value) in vars {
            if let Some(key) = by_env.get(&name) {
                self.values.insert((*key).to_string(), value);
            }
        }
    }

    pub fn apply_env(&mut self, known: &[&str]) {
        self.apply_env_from(known, std::env::vars());
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("key {key}: cannot parse {v:?}: {e}"))),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.values.get(key).map(String::as_str) {
            None => Ok(default),
            Some("true" | "1" | "yes" | "on") => Ok(true),
            Some("false" | "0" | "no" | "off") => Ok(false),
            Some(v) => Err(Error::Config(format!("key {key}: expected a boolean, got {v:?}"))),
        }
    }

    /// Rejects keys not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.values.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!("unknown key {k}"))),
            None => Ok(()),
        }
    }
}

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_uppercase().replace(['.', '-'], "_"))
}
