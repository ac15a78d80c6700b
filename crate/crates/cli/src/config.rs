//! Run configuration: a TOML file with one table per library config, then
//! `--set section.key=value` overrides, then the common flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use randreg_core::net::ModelConfig;
use randreg_core::synth::{DownstreamConfig, PairConfig};
use randreg_core::train::experiments::DeskPreset;
use randreg_core::train::{InstanceConfig, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; also the training seed unless `train.seed` is set.
    pub seed: u64,
    pub pairs: PairConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub downstream: DownstreamConfig,
    pub instance: InstanceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            pairs: PairConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig { ncc_window: 5, ..TrainConfig::default() },
            downstream: DownstreamConfig::default(),
            instance: InstanceConfig { ncc_window: 5, ..InstanceConfig::default() },
        }
    }
}

/// Parses `path` (if any) into a table and applies `overrides` on top.
pub fn load_table(path: Option<&Path>, overrides: &[String]) -> Result<Table> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            text.parse::<Table>().with_context(|| format!("parsing {}", p.display()))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    Ok(table)
}

/// `a.b.c=value`; the value is read as TOML and falls back to a string.
fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("override {spec:?} is not key=value");
    };
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} is malformed");
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("override key {key:?} descends into a non-table"),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn from_table<T: DeserializeOwned>(table: Table) -> Result<T> {
    T::deserialize(Value::Table(table)).map_err(|e| anyhow::anyhow!("invalid configuration: {e}"))
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let table = load_table(path, overrides)?;
        let train_seeded = table.get("train").and_then(|t| t.get("seed")).is_some();
        let mut cfg: RunConfig = from_table(table)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if !train_seeded || seed.is_some() {
            cfg.train.seed = cfg.seed;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

pub fn load_preset(base: DeskPreset, path: Option<&Path>, overrides: &[String]) -> Result<DeskPreset> {
    let mut table = match toml::Table::try_from(&base) {
        Ok(t) => t,
        Err(e) => bail!("cannot serialise preset: {e}"),
    };
    let user = load_table(path, overrides)?;
    merge(&mut table, user);
    from_table(table)
}

fn merge(into: &mut Table, from: Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(Value::Table(a)), Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_types_parse() {
        let cfg = RunConfig::load(None, &["train.epochs=3".into(), "model.stages=2".into()], Some(9)).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.stages, 2);
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::load(None, &["train.epoch=3".into()], None).is_err());
        assert!(RunConfig::load(None, &["nonsense=1".into()], None).is_err());
    }

    #[test]
    fn dump_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = from_table(text.parse::<Table>().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn preset_merge_keeps_unset_fields() {
        let p = load_preset(DeskPreset::transfer(), None, &["finetune.epochs=4".into()]).unwrap();
        assert_eq!(p.finetune.epochs, 4);
        assert_eq!(p.seeds, DeskPreset::transfer().seeds);
    }
}
