//! Run configuration: built-in defaults, then an optional TOML file, then
//! `key=value` overrides. Keys are dotted (`engine.tau = 0.7`); unknown keys
//! are errors. The resolved document is echoed into every artifact along
//! with its hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::DetectorConfig;
use crate::engine::{AdaptConfig, PretrainConfig};
use crate::{Error, Result};

pub const SEED_ENV: &str = "SFOD_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_thresh: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_thresh: 0.5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the seed of every section.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub detector: DetectorConfig,
    pub pretrain: PretrainConfig,
    pub engine: AdaptConfig,
    pub eval: EvalConfig,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("malformed key `{key}`")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(config_err(format!("`{key}`: `{p}` is not a section"))),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Resolves defaults < `SFOD_SEED` < file < overrides. Each override is
    /// `dotted.key=value` with a TOML value.
    pub fn resolve(file: Option<&Path>, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut doc = toml::Table::new();
        if let Some(s) = env_seed {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| config_err(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            doc.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
            let parsed: toml::Table = text.parse().map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            merge(&mut doc, parsed);
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_err(format!("override `{o}` is not key=value")))?;
            set_path(&mut doc, k.trim(), parse_value(v.trim()))?;
        }
        let mut cfg: RunConfig = toml::Value::Table(doc).try_into().map_err(config_err)?;
        if let Some(s) = cfg.seed {
            cfg.pretrain.seed = s;
            cfg.engine.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.pretrain.validate()?;
        self.engine.validate()?;
        if !(self.eval.iou_thresh > 0.0 && self.eval.iou_thresh <= 1.0) {
            return Err(config_err(format!("eval.iou_thresh = {} outside (0, 1]", self.eval.iou_thresh)));
        }
        Ok(())
    }

    /// Canonical TOML text of the resolved configuration.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of [`RunConfig::echo`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.echo().as_bytes()))
    }

    /// Reads an echo back, checking it against `expected_hash` when given.
    pub fn from_echo(text: &str, expected_hash: Option<&str>) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(config_err)?;
        if let Some(h) = expected_hash {
            if cfg.hash() != h {
                return Err(config_err(format!("config echo hash {} does not match {h}", cfg.hash())));
            }
        }
        Ok(cfg)
    }
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(file: &str, overrides: &[&str], env: Option<&str>) -> Result<RunConfig> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, file).unwrap();
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        RunConfig::resolve(Some(&p), &o, env)
    }

    #[test]
    fn layering_order() {
        let c = resolve("engine.tau = 0.8\npretrain.lr = 0.01\n", &["engine.tau=0.9"], None).unwrap();
        assert_eq!(c.engine.tau, 0.9);
        assert_eq!(c.pretrain.lr, 0.01);
        assert_eq!(c.engine.gamma, 0.5);
        let c = resolve("seed = 5\n", &[], Some("3")).unwrap();
        assert_eq!((c.pretrain.seed, c.engine.seed), (5, 5));
        let c = resolve("", &[], Some("3")).unwrap();
        assert_eq!(c.engine.seed, 3);
        let c = resolve("[engine]\nenable_pfd = false\n[engine.afsp]\nalpha = 0.3\n", &[], None).unwrap();
        assert!(!c.engine.enable_pfd);
        assert_eq!(c.engine.afsp.alpha, 0.3);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(resolve("engine.taux = 0.8\n", &[], None), Err(Error::Config(_))));
        assert!(matches!(resolve("colour = 1\n", &[], None), Err(Error::Config(_))));
        assert!(matches!(resolve("", &["engine.tau=1.5"], None), Err(Error::Config(_))));
        assert!(matches!(resolve("", &["engine.tau"], None), Err(Error::Config(_))));
        assert!(matches!(resolve("", &["engine.tau.x=1"], None), Err(Error::Config(_))));
        assert!(matches!(resolve("", &[], Some("abc")), Err(Error::Config(_))));
        assert!(matches!(resolve("engine.batch_size = 3\n", &[], None), Err(Error::Config(_))));
    }

    #[test]
    fn echo_round_trips_with_stable_hash() {
        let c = resolve("engine.ema_period = 7\n", &["detector.score_thresh=0.1", "seed=9"], None).unwrap();
        let back = RunConfig::from_echo(&c.echo(), Some(&c.hash())).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(RunConfig::default().hash(), RunConfig::default().hash());
        assert_ne!(c.hash(), RunConfig::default().hash());
        assert!(RunConfig::from_echo(&c.echo(), Some("00")).is_err());
    }
}
