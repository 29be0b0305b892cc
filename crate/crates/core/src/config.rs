//! Run configuration: one flat TOML table, unknown keys rejected, with
//! `key=value` overrides applied on top of the file before validation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{ClvError, Result};
use crate::generator::GenerationConfig;
use crate::latent::{KlAggregation, KlDirection};
use crate::separation::SeparationConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoSelfSeparation,
    NoContrastive,
    NoDecider,
    NoJointTraining,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::NoSelfSeparation,
        Ablation::NoContrastive,
        Ablation::NoDecider,
        Ablation::NoJointTraining,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoSelfSeparation => "no_self_separation",
            Ablation::NoContrastive => "no_contrastive",
            Ablation::NoDecider => "no_decider",
            Ablation::NoJointTraining => "no_joint_training",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = ClvError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| ClvError::Config {
                field: "ablation".into(),
                message: format!("unknown ablation `{s}`"),
            })
    }
}

/// Accepts either a list of names or a single (possibly comma-separated) string.
fn ablation_set<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<BTreeSet<Ablation>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(String),
        Many(Vec<Ablation>),
    }
    match OneOrMany::deserialize(de)? {
        OneOrMany::Many(v) => Ok(v.into_iter().collect()),
        OneOrMany::One(s) => s
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(serde::de::Error::custom))
            .collect(),
    }
}

/// How the contrastive/decider step and the generation step interleave.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alternation {
    /// One contrastive/decider step, then one generation step, per batch.
    #[default]
    Batch,
    /// A full pass of contrastive/decider steps, then a full generation pass.
    Epoch,
}

/// Architecture settings stored alongside the weights in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub separation: SeparationConfig,
    pub z_dim: usize,
    pub share_trunk: bool,
    pub include_null_persona: bool,
    pub kl_direction: KlDirection,
    pub kl_aggregation: KlAggregation,
    pub max_len: usize,
    pub ablation: BTreeSet<Ablation>,
}

impl ModelConfig {
    pub fn has(&self, a: Ablation) -> bool {
        self.ablation.contains(&a)
    }

    pub fn n_groups(&self) -> usize {
        self.separation.n_groups
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.separation.validate(self.encoder.d)?;
        if self.z_dim == 0 {
            return Err(ClvError::Config {
                field: "z_dim".into(),
                message: "must be positive".into(),
            });
        }
        if self.max_len < 2 || 2 * self.max_len + 1 > self.encoder.max_position {
            return Err(ClvError::Config {
                field: "max_len".into(),
                message: format!(
                    "must be at least 2 and leave room for query and response (2·max_len + 1 <= max_position = {})",
                    self.encoder.max_position
                ),
            });
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Config::default().model()
    }
}

/// Every tunable of a run. Field names are the keys of the TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub train_corpus: Option<PathBuf>,
    pub valid_corpus: Option<PathBuf>,
    pub min_count: usize,
    pub max_len: usize,

    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_position: usize,
    pub share_trunk: bool,

    #[serde(alias = "N")]
    pub n_groups: usize,
    pub tau: f64,
    /// 0 means "same as d".
    pub z_dim: usize,
    pub include_null_persona: bool,
    pub kl_direction: KlDirection,
    pub kl_aggregation: KlAggregation,

    pub batch_size: usize,
    pub max_learning_rate: f64,
    pub warmup_fraction: f64,
    pub beta_anneal_fraction: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub contrastive_weight: f64,
    pub epochs: usize,
    pub seed: u64,
    pub alternation: Alternation,
    #[serde(deserialize_with = "ablation_set")]
    pub ablation: BTreeSet<Ablation>,

    pub top_p: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
}

impl Default for Config {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let sep = SeparationConfig::default();
        let gen = GenerationConfig::default();
        Config {
            train_corpus: None,
            valid_corpus: None,
            min_count: 1,
            max_len: 32,
            d: enc.d,
            layers: enc.layers,
            heads: enc.heads,
            dropout: enc.dropout,
            max_position: enc.max_position,
            share_trunk: true,
            n_groups: sep.n_groups,
            tau: sep.tau,
            z_dim: 0,
            include_null_persona: false,
            kl_direction: KlDirection::Standard,
            kl_aggregation: KlAggregation::Weighted,
            batch_size: 16,
            max_learning_rate: 1e-4,
            warmup_fraction: 0.05,
            beta_anneal_fraction: 0.1,
            weight_decay: 0.01,
            grad_clip: 1.0,
            contrastive_weight: 1.0,
            epochs: 10,
            seed: 0,
            alternation: Alternation::Batch,
            ablation: BTreeSet::new(),
            top_p: gen.top_p,
            temperature: gen.temperature,
            max_new_tokens: gen.max_new_tokens,
        }
    }
}

fn field_error(message: String) -> ClvError {
    // serde messages look like "unknown field `x`, expected one of ..."
    let field = message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<config>".into());
    ClvError::Config { field, message }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl Config {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ClvError::Config {
            field: "<file>".into(),
            message: e.message().to_string(),
        })?;
        for o in overrides {
            let (key, value) = o.split_once('=').ok_or_else(|| ClvError::Config {
                field: o.clone(),
                message: "override must look like key=value".into(),
            })?;
            table.insert(key.trim().to_string(), parse_value(value.trim()));
        }
        let config: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| field_error(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut config = Self::from_toml_str(&text, overrides)?;
        // corpus paths are relative to the config file; absolute paths keep a
        // written snapshot valid wherever it lands
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.train_corpus, &mut config.valid_corpus].into_iter().flatten() {
            if p.is_relative() {
                *p = std::path::absolute(base.join(&*p))?;
            }
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn has(&self, a: Ablation) -> bool {
        self.ablation.contains(&a)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d: self.d,
                layers: self.layers,
                heads: self.heads,
                dropout: self.dropout,
                max_position: self.max_position,
            },
            separation: SeparationConfig {
                n_groups: self.n_groups,
                tau: self.tau,
            },
            z_dim: if self.z_dim == 0 { self.d } else { self.z_dim },
            share_trunk: self.share_trunk,
            include_null_persona: self.include_null_persona,
            kl_direction: self.kl_direction,
            kl_aggregation: self.kl_aggregation,
            max_len: self.max_len,
            ablation: self.ablation.clone(),
        }
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            top_p: self.top_p,
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            seed: self.seed,
            greedy: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(ClvError::Config {
                field: field.into(),
                message: message.into(),
            })
        };
        self.model().validate()?;
        self.generation().validate()?;
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.max_learning_rate > 0.0 && self.max_learning_rate.is_finite()) {
            return bad("max_learning_rate", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.beta_anneal_fraction) {
            return bad("beta_anneal_fraction", "must lie in [0, 1]");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay", "must be non-negative");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip", "must be positive");
        }
        if self.contrastive_weight < 0.0 {
            return bad("contrastive_weight", "must be non-negative");
        }
        if self.min_count == 0 {
            return bad("min_count", "must be at least 1");
        }
        Ok(())
    }
}
