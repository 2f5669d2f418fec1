//! Key = value configuration files covering the model shape and the
//! training schedule. Unknown keys are rejected so typos surface instead of
//! silently training with defaults.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use svtnet::model::{ModelConfig, Variant};
use svtnet::training::{AugmentConfig, LossReduction, TrainConfig};

/// Model and training settings resolved from defaults, an optional config
/// file, and explicit command-line flags, in that precedence order.
#[derive(Debug, Clone)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Settings {
    pub fn new(variant: Variant) -> Self {
        Self {
            model: ModelConfig::with_variant(variant),
            train: TrainConfig::default(),
        }
    }

    /// Applies every `key = value` line of a config file. Lines that are
    /// blank or start with `#` are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {}: expected key = value", lineno + 1))?;
            self.apply(key.trim(), value.trim())
                .with_context(|| format!("config line {}", lineno + 1))?;
        }
        Ok(())
    }

    /// Applies one setting by name.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse::<T>()
                .map_err(|_| anyhow!("invalid value {value:?} for {key}"))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "yes" | "on" | "1" => Ok(true),
                "false" | "no" | "off" | "0" => Ok(false),
                _ => bail!("invalid value {value:?} for {key}, expected true or false"),
            }
        }
        // Optional epoch indices accept `none` to disable the event.
        fn opt_num(key: &str, value: &str) -> Result<Option<usize>> {
            if value == "none" {
                Ok(None)
            } else {
                num::<usize>(key, value).map(Some)
            }
        }

        match key {
            "variant" => self.model.variant = value.parse::<Variant>()?,
            "d" | "feature_dim" => self.model.feature_dim = num(key, value)?,
            "l_t" | "n_tokens" => self.model.n_tokens = num(key, value)?,
            "reduction" => self.model.reduction = num(key, value)?,
            "base_channels" => self.model.base_channels = num(key, value)?,
            "quant_step" => self.model.quant_step = num(key, value)?,
            "gem_p" => self.model.gem_p_init = num(key, value)?,
            "csvt_softmax_over_voxels" => {
                self.model.csvt_softmax_over_voxels = flag(key, value)?
            }

            "epochs" => self.train.epochs = num(key, value)?,
            "lr" => self.train.lr = num(key, value)?,
            "lr_drop_epoch" => self.train.lr_drop_epoch = opt_num(key, value)?,
            "lr_drop_factor" => self.train.lr_drop_factor = num(key, value)?,
            "margin" => self.train.triplet.margin = num(key, value)?,
            "loss_reduction" => {
                self.train.triplet.reduction = match value {
                    "mean" => LossReduction::Mean,
                    "sum" => LossReduction::Sum,
                    _ => bail!("invalid value {value:?} for loss_reduction, expected mean or sum"),
                }
            }
            "batch_init" => self.train.initial_batch = num(key, value)?,
            "batch_max" | "batch_cap" => self.train.batch_cap = num(key, value)?,
            "batch_threshold" => self.train.batch_threshold = num(key, value)?,
            "batch_growth" => self.train.batch_growth = num(key, value)?,
            "positive_radius" => self.train.positive_radius = num(key, value)?,
            "negative_radius" => self.train.negative_radius = num(key, value)?,
            "max_iterations" => self.train.max_iterations = opt_num(key, value)?,
            "seed" => self.train.seed = num(key, value)?,

            "augment" => {
                self.train.augment = if flag(key, value)? {
                    Some(self.train.augment.take().unwrap_or_default())
                } else {
                    None
                }
            }
            "jitter_prob" => self.augment_mut().jitter_prob = num(key, value)?,
            "jitter_sigma" => self.augment_mut().jitter_sigma = num(key, value)?,
            "jitter_clip" => self.augment_mut().jitter_clip = num(key, value)?,
            "translation_prob" => self.augment_mut().translation_prob = num(key, value)?,
            "translation_range" => self.augment_mut().translation_range = num(key, value)?,
            "removal_prob" => self.augment_mut().removal_prob = num(key, value)?,
            "removal_max_fraction" => self.augment_mut().removal_max_fraction = num(key, value)?,
            "erase_prob" => self.augment_mut().erase_prob = num(key, value)?,
            "erase_max_fraction" => self.augment_mut().erase_max_fraction = num(key, value)?,

            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    /// Augmentation sub-keys enable augmentation if it was off.
    fn augment_mut(&mut self) -> &mut AugmentConfig {
        self.train.augment.get_or_insert_with(AugmentConfig::default)
    }
}
