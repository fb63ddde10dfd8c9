//! Flat `key = value` configuration files merged with command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{CliError, Result};

/// Environment variable consulted for the seed when neither a flag nor the
/// config file sets one.
pub const SEED_ENV: &str = "P2D_SEED";

/// Resolves each setting from a flag, then the config file, then a default,
/// and records the outcome for echoing.
#[derive(Debug, Default)]
pub struct Resolver {
    file: BTreeMap<String, String>,
    resolved: Vec<(String, String)>,
}

pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", n + 1)))?;
        let key = k.trim().replace('-', "_");
        if key.is_empty() {
            return Err(CliError::Usage(format!("config line {}: empty key", n + 1)));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::Usage(format!("config line {}: duplicate key `{key}`", n + 1)));
        }
    }
    Ok(out)
}

impl Resolver {
    pub fn new(config: Option<&Path>, allowed: &[&str]) -> Result<Self> {
        let file = match config {
            Some(p) => parse(&fs::read_to_string(p).map_err(|e| CliError::io(p, e))?)?,
            None => BTreeMap::new(),
        };
        if let Some(bad) = file.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(CliError::Usage(format!(
                "unknown config key `{bad}` (allowed: {})",
                allowed.join(", ")
            )));
        }
        Ok(Resolver {
            file,
            resolved: Vec::new(),
        })
    }

    fn from_file<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.file
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::Usage(format!("config key `{key}`: {e}")))
            })
            .transpose()
    }

    fn record(&mut self, key: &str, value: String) {
        self.resolved.push((key.to_string(), value));
    }

    pub fn value<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => v,
            None => self.from_file(key)?.unwrap_or(default),
        };
        self.record(key, v.to_string());
        Ok(v)
    }

    pub fn required<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => v,
            None => self
                .from_file(key)?
                .ok_or_else(|| CliError::Usage(format!("missing required setting `--{}`", key.replace('_', "-"))))?,
        };
        self.record(key, v.to_string());
        Ok(v)
    }

    pub fn optional<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => self.from_file(key)?,
        };
        self.record(key, v.as_ref().map(|v| v.to_string()).unwrap_or_default());
        Ok(v)
    }

    pub fn required_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        let flag = flag.map(|p| p.to_string_lossy().into_owned());
        self.required::<String>(key, flag).map(PathBuf::from)
    }

    pub fn optional_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
        let flag = flag.map(|p| p.to_string_lossy().into_owned());
        Ok(self.optional::<String>(key, flag)?.map(PathBuf::from))
    }

    /// A switch is on when the flag is given or the file says `true`.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool> {
        let v = flag || self.from_file::<bool>(key)?.unwrap_or(false);
        self.record(key, v.to_string());
        Ok(v)
    }

    /// Flag, then config file, then [`SEED_ENV`], then 0.
    pub fn seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let v = match flag {
            Some(v) => v,
            None => match self.from_file("seed")? {
                Some(v) => v,
                None => match std::env::var(SEED_ENV) {
                    Ok(s) => s
                        .trim()
                        .parse()
                        .map_err(|e| CliError::Usage(format!("{SEED_ENV}: {e}")))?,
                    Err(_) => 0,
                },
            },
        };
        self.record("seed", v.to_string());
        Ok(v)
    }

    /// The resolved settings in `key=value` form, one per line.
    pub fn echo(&self) -> String {
        self.resolved.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
