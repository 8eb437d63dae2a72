//! Flat `key=value` text used by config files, manifests and metric reports.
//!
//! One pair per line; blank lines and lines starting with `#` are ignored.
//! Keys may not repeat.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub fn parse_kv(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format("key-value", path, format!("line {} has no '='", n + 1)))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::format("key-value", path, format!("duplicate key {k}")));
        }
    }
    Ok(out)
}

pub fn render_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Typed lookup helper over a parsed key-value map.
pub struct KvReader<'a> {
    map: &'a BTreeMap<String, String>,
    path: &'a Path,
}

impl<'a> KvReader<'a> {
    pub fn new(map: &'a BTreeMap<String, String>, path: &'a Path) -> Self {
        KvReader { map, path }
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::format("key-value", self.path, format!("bad value {v:?} for {key}"))),
        }
    }

    pub fn req<T: FromStr>(&self, key: &str) -> Result<T> {
        self.opt(key)?
            .ok_or_else(|| Error::format("key-value", self.path, format!("missing key {key}")))
    }
}
