//! `key = value` files: one pair per line, `#` starts a comment.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Malformed {
            line: i + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Malformed {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        if map.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Malformed {
                line: i + 1,
                message: format!("duplicate key `{k}`"),
            });
        }
    }
    Ok(map)
}

/// Typed lookups over a parsed map that track which keys were consumed.
pub struct Kv {
    map: BTreeMap<String, String>,
    used: std::collections::BTreeSet<String>,
}

impl Kv {
    pub fn new(map: BTreeMap<String, String>) -> Self {
        Kv {
            map,
            used: Default::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(Kv::new(parse_kv(text)?))
    }

    pub fn raw(&mut self, key: &str) -> Option<&str> {
        self.used.insert(key.to_string());
        self.map.get(key).map(String::as_str)
    }

    pub fn get<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`"))),
        }
    }

    pub fn get_or<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn bool_or(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some("true" | "yes" | "on" | "1") => Ok(true),
            Some("false" | "no" | "off" | "0") => Ok(false),
            Some(v) => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
        }
    }

    /// Fails on keys nobody asked for, which are almost always typos.
    pub fn finish(self) -> Result<()> {
        let unknown: Vec<_> = self
            .map
            .keys()
            .filter(|k| !self.used.contains(*k))
            .cloned()
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }
}
