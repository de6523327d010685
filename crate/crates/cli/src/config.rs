//! JSON run configuration merged under command-line flags.
//!
//! A config file is a JSON object whose keys are the long flag names of the
//! subcommand (for example `"gaussian-sigma": 4.0`), plus the global keys
//! `seed` and `jobs`. A flag given on the command line always wins over the
//! same key in the file.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::Failure;

/// Environment fallback for `--seed`.
pub const SEED_ENV: &str = "GROUNDCHECK_SEED";

pub fn read_config(path: &Path) -> Result<Map<String, Value>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::new("config", format!("{}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Failure::new("config", format!("{}: expected a JSON object", path.display()))),
        Err(e) => Err(Failure::new("config", format!("{}: {e}", path.display()))),
    }
}

/// Overlays the flags that were actually given (non-null, non-false) onto
/// the config entries and deserializes the result.
pub fn merge<T: Serialize + DeserializeOwned>(flags: &T, config: Map<String, Value>) -> Result<T, Failure> {
    let Value::Object(given) = serde_json::to_value(flags).expect("flag structs serialize") else {
        unreachable!("flag structs serialize to objects")
    };
    let mut merged = config;
    for (k, v) in given {
        if !(v.is_null() || v == Value::Bool(false)) {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| Failure::new("config", e.to_string()))
}

/// `--seed`, then the config's `seed`, then `GROUNDCHECK_SEED`.
pub fn resolve_seed(flag: Option<u64>, config: Option<&Value>) -> Result<Option<u64>, Failure> {
    if flag.is_some() {
        return Ok(flag);
    }
    if let Some(v) = config {
        return v
            .as_u64()
            .map(Some)
            .ok_or_else(|| Failure::new("config", format!("seed must be a non-negative integer, got {v}")));
    }
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::usage(format!("{SEED_ENV}={s} is not a non-negative integer"))),
        Err(_) => Ok(None),
    }
}

pub fn resolve_jobs(flag: Option<usize>, config: Option<&Value>) -> Result<usize, Failure> {
    let n = match (flag, config) {
        (Some(n), _) => n,
        (None, Some(v)) => v
            .as_u64()
            .ok_or_else(|| Failure::new("config", format!("jobs must be a positive integer, got {v}")))?
            as usize,
        (None, None) => 1,
    };
    if n == 0 {
        return Err(Failure::usage("--jobs must be at least 1".into()));
    }
    Ok(n)
}
