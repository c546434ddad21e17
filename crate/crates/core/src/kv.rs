//! Flat `key = value` text documents, used for configs, model manifests
//! and machine-readable reports. `#` starts a comment line.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvDoc {
    entries: Vec<(String, String)>,
    origin: PathBuf,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut doc = KvDoc {
            entries: Vec::new(),
            origin: origin.to_path_buf(),
        };
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format(origin, format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::format(origin, format!("line {}: empty key", lineno + 1)));
            }
            if doc.raw(k).is_some() {
                return Err(Error::format(origin, format!("line {}: duplicate key {k}", lineno + 1)));
            }
            doc.entries.push((k.to_string(), v.trim().to_string()));
        }
        Ok(doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }

    pub fn origin(&self) -> &Path {
        &self.origin
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.raw(key)
            .ok_or_else(|| Error::format(&self.origin, format!("missing key {key}")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::format(&self.origin, format!("bad value {v:?} for {key}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn parse_required<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::format(&self.origin, format!("missing key {key}")))
    }

    /// Comma-separated list value.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<T>().map_err(|_| {
                            Error::format(&self.origin, format!("bad list item {s:?} for {key}"))
                        })
                    })
                    .collect()
            })
            .transpose()
    }
}

impl std::fmt::Display for KvDoc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

pub fn join_list<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}
