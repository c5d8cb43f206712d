//! Experiment configuration as TOML.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::ClusteringBackend;
use crate::datagen::{default_domains, DomainSpec, PartitionSpec};
use crate::error::{Error, Result};
use crate::losses::LossHyper;
use crate::model::{ModelShape, OptimizerConfig};
use crate::prototypes::{ClusterSettings, PrivacyConfig, PrototypeMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrototypeConfig {
    pub local_mode: PrototypeMode,
    pub global_mode: PrototypeMode,
    /// Forward every local prototype instead of building a global set.
    pub broadcast_local: bool,
    pub backend: ClusteringBackend,
    /// Cluster count for the `kmeans` backend.
    pub kmeans_k: usize,
    /// Weight averaged global prototypes by member counts.
    pub member_weighted_average: bool,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        PrototypeConfig {
            local_mode: PrototypeMode::Cluster,
            global_mode: PrototypeMode::Cluster,
            broadcast_local: false,
            backend: ClusteringBackend::Finch,
            kmeans_k: 2,
            member_weighted_average: false,
        }
    }
}

impl PrototypeConfig {
    pub fn cluster_settings(&self) -> ClusterSettings {
        ClusterSettings {
            backend: self.backend,
            kmeans_k: self.kmeans_k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seed of a single training run.
    pub seed: u64,
    /// Seeds of a multi-run experiment.
    pub seeds: Vec<u64>,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Worker threads for client updates; 1 runs sequentially.
    pub parallelism: usize,
    /// Fraction of clients sampled each round.
    pub participation: f64,
    /// Clients per domain; empty means one each.
    pub clients_per_domain: Vec<usize>,
    pub model: ModelShape,
    pub optimizer: OptimizerConfig,
    pub loss: LossHyper,
    pub prototypes: PrototypeConfig,
    pub privacy: PrivacyConfig,
    pub partition: PartitionSpec,
    pub domains: Vec<DomainSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            rounds: 30,
            local_epochs: 2,
            batch_size: 32,
            parallelism: 1,
            participation: 1.0,
            clients_per_domain: Vec::new(),
            model: ModelShape::default(),
            optimizer: OptimizerConfig::default(),
            loss: LossHyper::default(),
            prototypes: PrototypeConfig::default(),
            privacy: PrivacyConfig::default(),
            partition: PartitionSpec::default(),
            domains: default_domains(),
        }
    }
}

impl ExperimentConfig {
    pub fn clients_per_domain(&self) -> Vec<usize> {
        if self.clients_per_domain.is_empty() {
            vec![1; self.domains.len()]
        } else {
            self.clients_per_domain.clone()
        }
    }

    pub fn num_clients(&self) -> usize {
        self.clients_per_domain().iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.parallelism == 0 {
            return Err(Error::config("parallelism", "must be >= 1"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config("participation", format!("must lie in (0, 1], got {}", self.participation)));
        }
        if self.domains.is_empty() {
            return Err(Error::config("domains", "at least one domain is required"));
        }
        if !self.clients_per_domain.is_empty() && self.clients_per_domain.len() != self.domains.len() {
            return Err(Error::config(
                "clients_per_domain",
                format!("has {} entries for {} domains", self.clients_per_domain.len(), self.domains.len()),
            ));
        }
        if self.clients_per_domain().iter().sum::<usize>() == 0 {
            return Err(Error::config("clients_per_domain", "at least one client is required"));
        }
        if self.prototypes.kmeans_k == 0 {
            return Err(Error::config("prototypes.kmeans_k", "must be >= 1"));
        }
        self.model.validate()?;
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.privacy.validate()?;
        self.partition.validate()?;
        for (i, d) in self.domains.iter().enumerate() {
            d.validate(i)?;
        }
        Ok(())
    }

    /// Seeds of the experiment; falls back to `seed`.
    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigParse(e.to_string()))
    }
}

/// Parses a TOML value; bare words that are not TOML become strings.
fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `key.path=value` to `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::ConfigParse(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::ConfigParse(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

/// Parses and validates TOML text with `overrides` applied first.
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::ConfigParse(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: ExperimentConfig =
        ExperimentConfig::deserialize(table).map_err(|e: toml::de::Error| Error::ConfigParse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config_with(path, &[])
}

pub fn parse_config_with(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, overrides)
}
