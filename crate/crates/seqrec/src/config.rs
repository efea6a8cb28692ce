//! Flat key=value configuration with defaults for every key.
//!
//! A config file (one `key=value` per line, `#` comments) is optional;
//! command-line `--set key=value` overrides win over the file, which wins
//! over the defaults. Every effective value is echoed into the run manifest.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::{ConditionFamily, GenConfig};
use crate::train::{Ablation, TrainConfig};

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "7"),
    // synthetic benchmark
    ("gen.users", "10000"),
    ("gen.items", "3000"),
    ("gen.genres", "10"),
    ("gen.languages", "4"),
    ("gen.requests_per_user", "40"),
    ("gen.items_per_request", "5"),
    ("gen.mean_interval_s", "900"),
    ("gen.core_genres", "3"),
    ("gen.core_weight_decay", "0.6"),
    ("gen.burst_repeat", "0.5"),
    ("gen.explore_prob", "0.12"),
    ("gen.drift_rate", "0.02"),
    // model
    ("model.d", "32"),
    ("model.backbone_layers", "3"),
    ("model.heads", "4"),
    ("model.branches", "2"),
    ("model.hash_buckets", "8192"),
    ("model.max_seq_len", "64"),
    ("model.null_token", "true"),
    ("model.condition_embedding", "true"),
    ("model.bias_buckets", "16"),
    // training
    ("train.batch_size", "256"),
    ("train.lr_pretrain", "0.0005"),
    ("train.lr_sft", "0.00001"),
    ("train.weight_decay", "0.000001"),
    ("train.pretrain_steps", "300"),
    ("train.sft_steps", "200"),
    ("train.context_len", "30"),
    ("train.delta_tau", "auto"),
    ("train.ablation", "tamip"),
    ("train.condition_family", "genre"),
    ("train.sft_split", "0.8"),
    ("train.holdout_requests", "2"),
    ("train.freeze_backbone", "false"),
    // evaluation
    ("eval.context_len", "48"),
    ("eval.horizon", "10"),
    ("eval.horizon_k", "50"),
    ("eval.hr_ks", "10,20,50"),
    // serving
    ("serve.p", "4"),
    ("serve.window", "200"),
    ("serve.k", "50"),
    ("serve.temporal_mask", "false"),
    ("serve.bench_trials", "30"),
    ("serve.bench_sweep", "1,2,4,8"),
];

#[derive(Debug, Clone)]
pub struct AppConfig {
    values: BTreeMap<String, String>,
}

impl AppConfig {
    pub fn defaults() -> AppConfig {
        AppConfig {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// Defaults, then the file (plain key=value, or a manifest JSON whose
    /// `config` object is reused), then explicit overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<AppConfig> {
        let mut cfg = AppConfig::defaults();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            if text.trim_start().starts_with('{') {
                let manifest: serde_json::Value = serde_json::from_str(&text)?;
                let map = manifest
                    .get("config")
                    .and_then(|c| c.as_object())
                    .ok_or_else(|| {
                        Error::Config(format!("{}: manifest has no config object", path.display()))
                    })?;
                for (k, v) in map {
                    let v = v.as_str().ok_or_else(|| {
                        Error::Config(format!("manifest config value for {k} is not a string"))
                    })?;
                    cfg.set(k, v)?;
                }
            } else {
                for (lineno, line) in text.lines().enumerate() {
                    let line = line.trim();
                    if line.is_empty() || line.starts_with('#') {
                        continue;
                    }
                    let (k, v) = line.split_once('=').ok_or_else(|| {
                        Error::Config(format!(
                            "{}:{}: expected key=value",
                            path.display(),
                            lineno + 1
                        ))
                    })?;
                    cfg.set(k.trim(), v.trim())?;
                }
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    fn raw(&self, key: &str) -> &str {
        &self.values[key]
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.raw(key)
            .parse()
            .map_err(|_| Error::Config(format!("config key {key}='{}' is invalid", self.raw(key))))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parse(key)
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key)
    }

    pub fn u32(&self, key: &str) -> Result<u32> {
        self.parse(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parse(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.parse(key)
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.raw(key)
            .split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| {
                    Error::Config(format!("config key {key}='{}' is invalid", self.raw(key)))
                })
            })
            .collect()
    }

    pub fn condition_family(&self) -> Result<ConditionFamily> {
        match self.raw("train.condition_family") {
            "genre" => Ok(ConditionFamily::Genre),
            "language" => Ok(ConditionFamily::Language),
            other => Err(Error::Config(format!(
                "train.condition_family='{other}' (expected genre or language)"
            ))),
        }
    }

    pub fn gen_config(&self) -> Result<GenConfig> {
        Ok(GenConfig {
            num_users: self.u64("gen.users")?,
            num_items: self.u64("gen.items")?,
            num_genres: self.u32("gen.genres")?,
            num_languages: self.u32("gen.languages")?,
            requests_per_user: self.u32("gen.requests_per_user")?,
            items_per_request: self.u32("gen.items_per_request")?,
            mean_request_interval_s: self.f64("gen.mean_interval_s")?,
            core_genres_per_user: self.u32("gen.core_genres")?,
            core_weight_decay: self.f64("gen.core_weight_decay")?,
            burst_repeat_prob: self.f64("gen.burst_repeat")?,
            explore_prob: self.f64("gen.explore_prob")?,
            drift_rate: self.f64("gen.drift_rate")?,
            seed: self.u64("seed")?,
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let family = self.condition_family()?;
        let genres = self.u32("gen.genres")?;
        let languages = self.u32("gen.languages")?;
        let ablation: Ablation = self.parse::<String>("train.ablation")?.parse()?;
        let branches = match ablation {
            Ablation::Nip => 1,
            _ => self.usize("model.branches")?,
        };
        let cfg = ModelConfig {
            d: self.usize("model.d")?,
            num_backbone_layers: self.usize("model.backbone_layers")?,
            num_heads: self.usize("model.heads")?,
            num_branches: branches,
            hash_buckets: self.usize("model.hash_buckets")?,
            num_genres: genres,
            num_languages: languages,
            condition_vocab: family.vocab_size(genres, languages),
            max_seq_len: self.usize("model.max_seq_len")?,
            null_token_enabled: self.bool("model.null_token")?,
            condition_embedding_enabled: self.bool("model.condition_embedding")?,
            bias_buckets: self.usize("model.bias_buckets")?,
            init_seed: self.u64("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let delta_tau = match self.raw("train.delta_tau") {
            "auto" => None,
            other => Some(other.parse().map_err(|_| {
                Error::Config(format!("train.delta_tau='{other}' (expected seconds or auto)"))
            })?),
        };
        let cfg = TrainConfig {
            batch_size: self.usize("train.batch_size")?,
            lr_pretrain: self.f64("train.lr_pretrain")?,
            lr_sft: self.f64("train.lr_sft")?,
            weight_decay: self.f64("train.weight_decay")?,
            pretrain_steps: self.usize("train.pretrain_steps")?,
            sft_steps: self.usize("train.sft_steps")?,
            context_len: self.usize("train.context_len")?,
            delta_tau,
            seed: self.u64("seed")?,
            condition_family: self.condition_family()?,
            sft_split_fraction: self.f64("train.sft_split")?,
            holdout_requests: self.usize("train.holdout_requests")?,
            freeze_backbone: self.bool("train.freeze_backbone")?,
            ablation: self.parse::<String>("train.ablation")?.parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
