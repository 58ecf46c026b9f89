//! Key-value run configuration.
//!
//! A config file holds `key = value` lines; `#` starts a comment. Values
//! from `--set key=value` replace file values, and dedicated flags
//! (`--seed`, `--preset`, `--temperature`) replace both.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use lsmtcr_core::error::Error as CoreError;
use lsmtcr_core::nn::checkpoint::Meta;

/// Keys every command accepts, used or not, so one config file can drive a
/// whole pipeline.
const SHARED: [&str; 3] = ["seed", "preset", "chain"];

#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

pub fn parse_line(line: &str) -> Result<Option<(String, String)>> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return Ok(None);
    }
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| anyhow!("expected key=value, got '{line}'"))?;
    let k = k.trim();
    if k.is_empty() {
        bail!("empty key in '{line}'");
    }
    Ok(Some((k.to_string(), v.trim().to_string())))
}

impl Settings {
    pub fn load(config: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = config {
            if !path.exists() {
                return Err(CoreError::MissingInput(path.to_path_buf()).into());
            }
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            for (i, line) in text.lines().enumerate() {
                if let Some((k, v)) = parse_line(line).with_context(|| format!("{}:{}", path.display(), i + 1))? {
                    values.insert(k, v);
                }
            }
        }
        for s in sets {
            let (k, v) = parse_line(s)?.ok_or_else(|| anyhow!("empty --set value"))?;
            values.insert(k, v);
        }
        Ok(Self {
            values,
            used: RefCell::default(),
        })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.values.get(key).map(String::as_str)
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| anyhow!("invalid value '{v}' for '{key}'")),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    pub fn require(&self, key: &str) -> Result<String> {
        self.raw(key)
            .map(str::to_string)
            .ok_or_else(|| anyhow!("missing required setting '{key}' (use --set {key}=...)"))
    }

    /// A required input path; absent files are reported as missing input.
    pub fn input(&self, key: &str) -> Result<PathBuf> {
        let p = PathBuf::from(self.require(key)?);
        if !p.exists() {
            return Err(CoreError::MissingInput(p).into());
        }
        Ok(p)
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| anyhow!("invalid item '{s}' in '{key}'")))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Fails on keys no part of the command looked at.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .values
            .keys()
            .filter(|k| !used.contains(*k) && !SHARED.contains(&k.as_str()))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            bail!("unknown setting(s) for this command: {}", unknown.join(", "));
        }
        Ok(())
    }

    /// The effective configuration as checkpoint metadata.
    pub fn snapshot(&self) -> Meta {
        self.values
            .iter()
            .map(|(k, v)| (format!("config.{k}"), v.clone()))
            .collect()
    }
}
