//! Run configuration: a TOML document of dotted keys such as
//! `loss.alpha = 0.65`, with command-line overrides applied on top.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use dptab_core::eval::{EvalOptions, GridSpec, DEFAULT_MAX_SUBSETS, DEFAULT_QUANTILE_GROUPS};
use dptab_core::losses::{LambdaMode, LossKind, LossSpec, NulMode};
use dptab_core::model::{ModelConfig, TrainableSet};
use dptab_core::sampler::{DEFAULT_MAX_RETRIES, DEFAULT_TEMPERATURE};
use dptab_core::trainer::{PrivacySpec, Stage1Config, Stage2Config, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub context_length: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout_prob: f64,
    pub adapter_rank: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::toy(0);
        Self {
            context_length: m.context_length,
            embed_dim: m.embed_dim,
            num_layers: m.num_layers,
            num_heads: m.num_heads,
            ffn_dim: m.ffn_dim,
            dropout_prob: m.dropout_prob,
            adapter_rank: m.adapter_rank,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Section {
    pub epochs: f64,
    pub learning_rate: f64,
    pub expected_batch_size: usize,
    pub non_private: bool,
    pub trainable: TrainableSet,
}

impl Default for Stage2Section {
    fn default() -> Self {
        let s = Stage2Config::default();
        Self {
            epochs: s.epochs,
            learning_rate: s.learning_rate,
            expected_batch_size: s.expected_batch_size,
            non_private: s.non_private,
            trainable: s.trainable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSection {
    pub kind: LossKind,
    pub alpha: f64,
    pub beta: f64,
    pub nul_mode: NulMode,
    /// `range`, `std` or `fixed:<v>`.
    pub lambda: String,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossSpec::default();
        Self { kind: l.kind, alpha: l.alpha, beta: l.beta, nul_mode: l.nul_mode, lambda: "range".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub single_stage: bool,
    pub probe_samples: usize,
    pub probe_temperature: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { single_stage: t.single_stage, probe_samples: t.probe_samples, probe_temperature: t.probe_temperature }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleSection {
    pub n: Option<usize>,
    pub temperature: f64,
    pub max_retries: u32,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { n: None, temperature: DEFAULT_TEMPERATURE, max_retries: DEFAULT_MAX_RETRIES }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub max_k: usize,
    pub quantile_groups: usize,
    pub max_subsets: usize,
    pub dcr_bins: usize,
    /// Use the wide hyperparameter grid instead of the desk-scale one.
    pub full_grid: bool,
    pub folds: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            max_k: 5,
            quantile_groups: DEFAULT_QUANTILE_GROUPS,
            max_subsets: DEFAULT_MAX_SUBSETS,
            dcr_bins: 20,
            full_grid: false,
            folds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FairnessSection {
    pub rhos: Vec<f64>,
}

impl Default for FairnessSection {
    fn default() -> Self {
        Self { rhos: vec![0.0, 0.05, 0.1, 0.2, 0.5] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepareSection {
    pub train_fraction: f64,
    pub target: Option<String>,
    pub sensitive: Option<String>,
}

impl Default for PrepareSection {
    fn default() -> Self {
        Self { train_fraction: 0.8, target: None, sensitive: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub prepare: PrepareSection,
    pub model: ModelSection,
    pub stage1: Stage1Config,
    pub stage2: Stage2Section,
    pub privacy: PrivacySpec,
    pub loss: LossSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
    pub fairness: FairnessSection,
}

impl RunConfig {
    /// Reads the optional config file and applies `key=value` overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut doc = match file {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Input(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (key, raw) in overrides {
            set_dotted(&mut doc, key, parse_scalar(raw))?;
        }
        let given = leaf_keys(&doc);
        let config: RunConfig = toml::Value::Table(doc.clone())
            .try_into()
            .map_err(|e| CliError::Input(format!("invalid config: {e}")))?;
        let known = leaf_keys(&toml::Table::try_from(&config).expect("config serializes"));
        let unknown: Vec<&String> = given.iter().filter(|k| !known.contains(*k)).collect();
        if !unknown.is_empty() {
            return Err(CliError::Input(format!("unknown config keys: {unknown:?}")));
        }
        Ok(config)
    }

    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| CliError::Input("a seed is required: pass --seed or set `seed` in the config".into()))
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let lambda_mode = LambdaMode::parse(&self.loss.lambda)
            .ok_or_else(|| CliError::Input(format!("loss.lambda: expected range, std or fixed:<v>, got {:?}", self.loss.lambda)))?;
        let m = &self.model;
        Ok(TrainConfig {
            model: ModelConfig {
                vocab_size: 0,
                context_length: m.context_length,
                embed_dim: m.embed_dim,
                num_layers: m.num_layers,
                num_heads: m.num_heads,
                ffn_dim: m.ffn_dim,
                dropout_prob: m.dropout_prob,
                adapter_rank: m.adapter_rank,
            },
            stage1: self.stage1.clone(),
            stage2: Stage2Config {
                epochs: self.stage2.epochs,
                learning_rate: self.stage2.learning_rate,
                expected_batch_size: self.stage2.expected_batch_size,
                privacy: self.privacy.clone(),
                loss: LossSpec {
                    kind: self.loss.kind,
                    alpha: self.loss.alpha,
                    beta: self.loss.beta,
                    lambda: Vec::new(),
                    nul_mode: self.loss.nul_mode,
                },
                lambda_mode,
                non_private: self.stage2.non_private,
                trainable: self.stage2.trainable,
            },
            single_stage: self.train.single_stage,
            seed,
            probe_samples: self.train.probe_samples,
            probe_temperature: self.train.probe_temperature,
        })
    }

    pub fn eval_options(&self, seed: u64) -> EvalOptions {
        let e = &self.eval;
        EvalOptions {
            max_k: e.max_k,
            quantile_groups: e.quantile_groups,
            max_subsets: e.max_subsets,
            dcr_bins: e.dcr_bins,
            grid: if e.full_grid { GridSpec::full() } else { GridSpec::desk() },
            folds: e.folds,
            seed,
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Interprets an override as a TOML value, falling back to a bare string.
fn parse_scalar(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Input(format!("malformed config key {key:?}")));
    }
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = node.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Input(format!("config key {key:?}: {part} is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn leaf_keys(doc: &toml::Table) -> BTreeSet<String> {
    fn walk(t: &toml::Table, prefix: &str, out: &mut BTreeSet<String>) {
        for (k, v) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                toml::Value::Table(sub) => walk(sub, &key, out),
                _ => {
                    out.insert(key);
                }
            }
        }
    }
    let mut out = BTreeSet::new();
    walk(doc, "", &mut out);
    out
}
