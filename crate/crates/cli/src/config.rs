//! `key = value` run configuration: file values, then flag overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::{CliError, Result};

/// Keys every command accepts.
pub const COMMON_KEYS: &[&str] = &["seed", "out"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub out: PathBuf,
    values: BTreeMap<String, String>,
}

fn normalize_key(k: &str) -> String {
    k.trim().replace('-', "_")
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let key = normalize_key(k);
        if key.is_empty() {
            return Err(CliError::Config(format!("line {}: empty key", i + 1)));
        }
        let v = v.trim();
        let v = v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v);
        out.push((key, v.to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Merges the optional file with flag values; flags win. Keys outside
    /// `allowed` (plus [`COMMON_KEYS`]) are rejected.
    pub fn build(
        command: &str,
        allowed: &[&str],
        file: Option<&Path>,
        flags: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut pairs = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                parse_config_text(&text)?
            }
            None => Vec::new(),
        };
        pairs.extend(flags.into_iter().map(|(k, v)| (normalize_key(&k), v)));
        let mut values = BTreeMap::new();
        for (k, v) in pairs {
            if !allowed.contains(&k.as_str()) && !COMMON_KEYS.contains(&k.as_str()) {
                return Err(CliError::UnknownKey { command: command.to_string(), key: k });
            }
            values.insert(k, v);
        }
        let seed = match values.remove("seed") {
            Some(s) => s.parse().map_err(|_| CliError::Config(format!("seed: `{s}` is not a u64")))?,
            None => 0,
        };
        let out = values.remove("out").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out").join(command));
        Ok(Self { command: command.to_string(), seed, out, values })
    }

    /// Builds a config directly from pairs, as the file would.
    pub fn from_pairs(command: &str, allowed: &[&str], pairs: &[(&str, &str)]) -> Result<Self> {
        Self::build(command, allowed, None, pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())))
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get_opt(key)?.unwrap_or(default))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::Config(format!("{key}: cannot parse `{v}`"))),
        }
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T: Clone,
    {
        match self.values.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| CliError::Config(format!("{key}: cannot parse `{s}`"))))
                .collect(),
        }
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.values.get(key).map(PathBuf::from).ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))
    }
}

/// Thread cap from `IKNO_THREADS`, defaulting to the hardware count.
pub fn thread_cap() -> Result<usize> {
    let hw = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("IKNO_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n.min(hw)),
            _ => Err(CliError::Config(format!("IKNO_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(hw),
    }
}
