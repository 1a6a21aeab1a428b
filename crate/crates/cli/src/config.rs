//! Run configuration: defaults, then a TOML file, then command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tlsi_core::data::{CategoryPattern, SyntheticSpec};
use tlsi_core::experiment::DataConfig;
use tlsi_core::model::ActivationKind;
use tlsi_core::{ModelConfig, TrainConfig, Variant};

/// Bad flags, config or paths. Exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub item_dim: usize,
    pub category_dim: usize,
    /// Defaults to `item_dim + category_dim`.
    pub hidden_dim: Option<usize>,
    pub mlp_hidden: usize,
    pub activation: ActivationKind,
    pub standardize: bool,
    pub max_len: usize,
    pub max_len_long: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let c = ModelConfig::new(Variant::Tlsi, 1, 1);
        Self {
            item_dim: c.item_dim,
            category_dim: c.category_dim,
            hidden_dim: None,
            mlp_hidden: c.mlp_hidden,
            activation: c.activation,
            standardize: c.standardize,
            max_len: c.max_len,
            max_len_long: c.max_len_long,
        }
    }
}

impl ModelSettings {
    pub fn model_config(
        &self,
        variant: Variant,
        n_items: usize,
        n_categories: usize,
    ) -> ModelConfig {
        let mut c = ModelConfig::new(variant, n_items, n_categories);
        c.item_dim = self.item_dim;
        c.category_dim = self.category_dim;
        c.hidden_dim = self.hidden_dim.unwrap_or(self.item_dim + self.category_dim);
        c.mlp_hidden = self.mlp_hidden;
        c.activation = self.activation;
        c.standardize = self.standardize;
        c.max_len = self.max_len;
        c.max_len_long = self.max_len_long;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let c = TrainConfig::default();
        Self {
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.adam.lr,
            clip_norm: c.clip_norm,
        }
    }
}

impl TrainSettings {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let mut c = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            clip_norm: self.clip_norm,
            ..Default::default()
        };
        c.adam.lr = self.lr;
        c
    }
}

/// Synthetic generator settings; categories are addressed as `cat<k>` or `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSettings {
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    pub noise: f64,
    pub seed: u64,
    pub horizon_days: f64,
    /// Start from a log without any planted patterns.
    pub plain: bool,
    pub periods: BTreeMap<String, f64>,
    pub hours: BTreeMap<String, Vec<u32>>,
}

impl Default for GenerateSettings {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            users: s.n_users,
            items: s.n_items,
            categories: s.n_categories,
            noise: s.noise_rate,
            seed: s.seed,
            horizon_days: s.horizon_days,
            plain: false,
            periods: BTreeMap::new(),
            hours: BTreeMap::new(),
        }
    }
}

pub fn parse_category(key: &str, n_categories: usize) -> anyhow::Result<usize> {
    let digits = key.strip_prefix("cat").unwrap_or(key);
    let k: usize = digits
        .parse()
        .map_err(|_| usage(format!("bad category `{key}`, expected cat<k> or <k>")))?;
    if k >= n_categories {
        return Err(usage(format!(
            "category {key} out of range for {n_categories} categories"
        )));
    }
    Ok(k)
}

impl GenerateSettings {
    pub fn spec(&self) -> anyhow::Result<SyntheticSpec> {
        let mut s = if self.plain {
            SyntheticSpec::plain(self.users, self.items, self.categories, self.seed)
        } else {
            SyntheticSpec::patterned(self.users, self.items, self.categories, self.seed)
        };
        s.noise_rate = self.noise;
        s.horizon_days = self.horizon_days;
        for (key, &days) in &self.periods {
            let k = parse_category(key, self.categories)?;
            s.patterns[k].period_days = Some(days);
        }
        for (key, hours) in &self.hours {
            let k = parse_category(key, self.categories)?;
            s.patterns[k] = CategoryPattern {
                active_hours: Some(hours.clone()),
                ..s.patterns[k].clone()
            };
        }
        s.validate().map_err(|e| usage(e.to_string()))?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Behavior log: a JSONL/CSV file or a directory holding `events.jsonl`.
    pub data: Option<PathBuf>,
    pub variant: Variant,
    /// `train` uses exactly one; `ablate` averages over all of them.
    pub seeds: Vec<u64>,
    pub model: ModelSettings,
    pub train: TrainSettings,
    pub split: DataConfig,
    pub generate: GenerateSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            variant: Variant::Tlsi,
            seeds: vec![0],
            model: ModelSettings::default(),
            train: TrainSettings::default(),
            split: DataConfig::default(),
            generate: GenerateSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            return Err(usage("seeds must not be empty"));
        }
        self.model
            .model_config(self.variant, 1, 1)
            .validate()
            .map_err(|e| usage(e.to_string()))?;
        self.train
            .train_config(0)
            .validate()
            .map_err(|e| usage(e.to_string()))?;
        if self.split.targets_per_user == 0 || !(0.0..1.0).contains(&self.split.holdout_fraction) {
            return Err(usage(
                "split: targets_per_user must be positive and holdout_fraction in [0, 1)",
            ));
        }
        Ok(())
    }

    /// The event file behind `data`, which must exist.
    pub fn data_file(&self) -> anyhow::Result<PathBuf> {
        let path = self
            .data
            .as_ref()
            .ok_or_else(|| usage("no dataset given (use --data or `data` in the config)"))?;
        let file = if path.is_dir() {
            path.join(crate::commands::EVENTS_FILE)
        } else {
            path.clone()
        };
        if !file.is_file() {
            return Err(usage(format!("dataset not found: {}", file.display())));
        }
        Ok(file)
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nepoch = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("colour = 1\n").is_err());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = toml::from_str("variant = \"lstm\"\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(c.variant, Variant::Lstm);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, TrainSettings::default().batch_size);
        assert_eq!(c.model, ModelSettings::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.generate.periods.insert("cat3".into(), 7.0);
        c.model.hidden_dim = Some(8);
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), c);
    }

    #[test]
    fn category_keys() {
        assert_eq!(parse_category("cat3", 5).unwrap(), 3);
        assert_eq!(parse_category("4", 5).unwrap(), 4);
        assert!(parse_category("cat5", 5).is_err());
        assert!(parse_category("dog", 5).is_err());
    }

    #[test]
    fn period_override_lands_on_category() {
        let mut g = GenerateSettings {
            categories: 6,
            ..Default::default()
        };
        g.periods.insert("cat3".into(), 9.0);
        g.hours.insert("1".into(), vec![20]);
        let s = g.spec().unwrap();
        assert_eq!(s.patterns[3].period_days, Some(9.0));
        assert_eq!(s.patterns[1].active_hours, Some(vec![20]));
    }
}
