//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! seed = 7
//! epochs = 30
//! freeze_policy = trunk-except-last-6
//! ```
//!
//! `seed` is required. Every other key has a default; unknown keys are an
//! error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mobinc::arch::{MobIncConfig, TrunkConfig};
use mobinc::data::AugmentPolicy;
use mobinc::train::{OptimizerKind, TrainConfig};
use mobinc::FreezePolicy;

pub const KEYS: &[&str] = &[
    "seed",
    "epochs",
    "batch_size",
    "learning_rate",
    "optimizer",
    "freeze_policy",
    "balance",
    "fine_tune",
    "fine_tune_epochs",
    "fine_tune_learning_rate",
    "image_size",
    "width_multiplier",
    "tap",
    "init_checkpoint",
    "augment",
    "horizontal_flip",
    "vertical_flip",
    "rotate_probability",
    "rotate_degrees",
    "shear_probability",
    "shear_degrees",
    "crop_probability",
    "crop_fraction",
    "translate_probability",
    "translate_fraction",
];

#[derive(Debug, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: MobIncConfig,
    /// Full-model or trunk-only checkpoint to start from.
    pub init_checkpoint: Option<PathBuf>,
}


fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse()
        .map_err(|_| ConfigError(format!("config key `{key}` has invalid value `{v}`")))
}

/// Splits text into an ordered key map, rejecting malformed lines, unknown
/// keys and duplicates.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("config line {} is not `key = value`: `{line}`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(ConfigError(format!("unknown config key `{k}`")));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(ConfigError(format!("config key `{k}` is set twice")));
        }
    }
    Ok(map)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let map = parse_pairs(text)?;
        let get = |k: &str| map.get(k).map(String::as_str);
        let mut cfg = RunConfig::default();
        let t = &mut cfg.train;

        t.seed = parse_value("seed", get("seed").ok_or_else(|| ConfigError("missing config key `seed`".into()))?)?;
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = get($key) {
                    $field = parse_value($key, v)?;
                }
            };
        }
        set!("epochs", t.epochs);
        set!("batch_size", t.batch_size);
        set!("learning_rate", t.optimizer.learning_rate);
        if let Some(v) = get("optimizer") {
            t.optimizer.kind = OptimizerKind::from_str(v).map_err(|e| ConfigError(format!("config key `optimizer`: {e}")))?;
        }
        if let Some(v) = get("freeze_policy") {
            t.freeze = v.parse().map_err(|e| ConfigError(format!("config key `freeze_policy`: {e}")))?;
        }
        set!("balance", t.balance);
        set!("fine_tune", t.fine_tune);
        set!("fine_tune_epochs", t.fine_tune_epochs);
        set!("fine_tune_learning_rate", t.fine_tune_learning_rate);
        set!("image_size", t.image_size);

        t.augment = match get("augment") {
            None | Some("default") => AugmentPolicy::default(),
            Some("none") => AugmentPolicy::none(),
            Some(other) => return Err(ConfigError(format!("config key `augment` must be `default` or `none`, got `{other}`"))),
        };
        let a = &mut t.augment;
        set!("horizontal_flip", a.horizontal_flip);
        set!("vertical_flip", a.vertical_flip);
        set!("rotate_probability", a.rotate.probability);
        set!("rotate_degrees", a.rotate.magnitude);
        set!("shear_probability", a.shear.probability);
        set!("shear_degrees", a.shear.magnitude);
        set!("crop_probability", a.crop.probability);
        set!("crop_fraction", a.crop.magnitude);
        set!("translate_probability", a.translate.probability);
        set!("translate_fraction", a.translate.magnitude);

        let mut trunk = TrunkConfig::default();
        set!("width_multiplier", trunk.width_multiplier);
        if let Some(v) = get("tap") {
            trunk.tap = v.to_string();
        }
        cfg.model.trunk = trunk;
        cfg.init_checkpoint = get("init_checkpoint").map(PathBuf::from);

        cfg.train.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config `{}`: {e}", path.display())))?;
        let cfg = Self::parse(&text)?;
        if let Some(p) = &cfg.init_checkpoint {
            if !p.is_file() {
                return Err(ConfigError(format!("config key `init_checkpoint`: `{}` does not exist", p.display())));
            }
        }
        Ok(cfg)
    }

    pub fn with_freeze_policy(mut self, policy: FreezePolicy) -> Self {
        self.train.freeze = policy;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_required() {
        let err = RunConfig::parse("epochs = 3\n").unwrap_err();
        assert!(err.0.contains("`seed`"), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("seed = 1\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.0.contains("`learning_rat`"), "{err}");
    }

    #[test]
    fn values_and_defaults() {
        let cfg = RunConfig::parse("# demo\nseed = 9\n\nepochs=4\nfreeze_policy = train-all\naugment = none\nrotate_probability = 0.25\n").unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.freeze, FreezePolicy::TrainAll);
        assert_eq!(cfg.train.augment.rotate.probability, 0.25);
        assert_eq!(cfg.train.augment.horizontal_flip, 0.0);
        assert_eq!(cfg.model, MobIncConfig::default());
    }

    #[test]
    fn bad_values_rejected() {
        assert!(RunConfig::parse("seed = x\n").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2\n").is_err());
        assert!(RunConfig::parse("seed = 1\nepochs = 0\n").is_err());
        assert!(RunConfig::parse("seed = 1\nno equals sign\n").is_err());
    }
}
