//! Plain-text `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. A key may repeat (scene
//! primitives use this); scalar lookups take the last occurrence so that
//! later lines override earlier ones.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: Vec<(String, String)>,
    source: Option<PathBuf>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::InvalidConfig(format!(
                    "line {}: expected `key = value`",
                    n + 1
                )));
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::InvalidConfig(format!("line {}: empty key", n + 1)));
            }
            entries.push((k.to_string(), v.trim().to_string()));
        }
        Ok(Self {
            entries,
            source: None,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        cfg.source = Some(path.to_path_buf());
        Ok(cfg)
    }

    /// Directory of the file this config came from, for resolving relative paths.
    pub fn base_dir(&self) -> Option<&Path> {
        self.source.as_deref().and_then(Path::parent)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.set(key, value)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.iter().any(|(k, _)| k == key)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .iter()
            .filter(move |(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get_str(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::InvalidConfig(format!("`{key}`: cannot parse {v:?}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Whitespace-separated list of numbers.
    pub fn get_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.get_str(key).map(|v| parse_list(key, v)).transpose()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }
}

pub fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("`{key}`: cannot parse {t:?}")))
        })
        .collect()
}

/// Checks `lo ≤ value ≤ hi` (or strict bounds) for a named parameter.
pub fn check_range(name: &str, value: f64, lo: f64, hi: f64, strict: bool) -> Result<()> {
    let ok = if strict {
        value > lo && value < hi
    } else {
        value >= lo && value <= hi
    };
    if ok && value.is_finite() {
        Ok(())
    } else {
        let (l, r) = if strict { ("(", ")") } else { ("[", "]") };
        Err(Error::InvalidConfig(format!(
            "`{name}` = {value} outside {l}{lo}, {hi}{r}"
        )))
    }
}
