//! Flat dotted-key run configuration.
//!
//! The file is TOML restricted to scalars and arrays under dotted keys, for
//! example `model.rho = -0.3`. Tables are flattened, unknown keys rejected.

use std::collections::BTreeMap;

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};
use toml::Value;

/// Every accepted key.
pub const KNOWN_KEYS: &[&str] = &[
    "model.type",
    "model.h",
    "model.eta",
    "model.rho",
    "model.nu",
    "model.alpha0",
    "backbone.kind",
    "backbone.c",
    "backbone.gamma",
    "backbone.grid",
    "backbone.values",
    "curve.grid",
    "curve.values",
    "sim.paths",
    "sim.steps",
    "sim.seed",
    "sim.t0",
    "sim.dt",
    "run.spot",
    "run.maturity",
    "run.strike_ratios",
    "run.tau_levels",
    "run.flavor",
    "run.tolerance_bp",
    "run.atm_tolerance_bp",
    "run.expected_exponent",
    "run.exponent_tol",
    "gfun.ymax",
    "gfun.n",
    "gfun.tol",
    "gfun.max_iter",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    entries: BTreeMap<String, Value>,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) -> Result<()> {
    match v {
        Value::Table(t) => {
            for (k, inner) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, inner, out)?;
            }
        }
        Value::Array(items) if items.iter().any(|i| matches!(i, Value::Table(_))) => {
            bail!("key {prefix}: arrays of tables are not allowed")
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let root: Value = text
            .parse::<toml::Table>()
            .map(Value::Table)
            .context("config is not valid TOML")?;
        let mut entries = BTreeMap::new();
        flatten("", &root, &mut entries)?;
        let unknown: Vec<&String> = entries
            .keys()
            .filter(|k| !KNOWN_KEYS.contains(&k.as_str()))
            .collect();
        if !unknown.is_empty() {
            bail!(
                "unknown config keys: {}",
                unknown
                    .iter()
                    .map(|k| k.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            );
        }
        Ok(Self { entries })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.entries
            .insert("sim.seed".into(), Value::Integer(seed as i64));
    }

    pub fn f64_opt(&self, key: &str) -> Result<Option<f64>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(Value::Float(v)) => Ok(Some(*v)),
            Some(Value::Integer(v)) => Ok(Some(*v as f64)),
            Some(other) => bail!("{key} must be a number, got {other}"),
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.f64_opt(key)?.unwrap_or(default))
    }

    pub fn f64_req(&self, key: &str) -> Result<f64> {
        self.f64_opt(key)?
            .ok_or_else(|| anyhow!("missing required key {key}"))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(Value::Integer(v)) if *v >= 0 => Ok(*v as usize),
            Some(other) => bail!("{key} must be a non-negative integer, got {other}"),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        Ok(self.usize_or(key, default as usize)? as u64)
    }

    pub fn str_opt(&self, key: &str) -> Result<Option<&str>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(other) => bail!("{key} must be a string, got {other}"),
        }
    }

    pub fn list_opt(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(Value::Array(items)) => items
                .iter()
                .map(|i| match i {
                    Value::Float(v) => Ok(*v),
                    Value::Integer(v) => Ok(*v as f64),
                    other => bail!("{key} must hold numbers, got {other}"),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(other) => bail!("{key} must be an array, got {other}"),
        }
    }

    /// Hex digest of the canonical `key = value` listing; stable under key
    /// order and formatting of the source file.
    pub fn tag(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.entries {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.to_string().as_bytes());
            h.update(b"\n");
        }
        h.finalize()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
