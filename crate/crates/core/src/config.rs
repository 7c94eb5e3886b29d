//! Flat `key = value` run configuration with layered resolution:
//! built-in defaults, then a config file, then command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::evaluation::{FeatureSource, FusionConfig, Protocol};
use crate::gradcheck::GradCheckSettings;
use crate::losses::{AlsParams, LossWeights};
use crate::model::ModelConfig;
use crate::training::{LrSchedule, TrainConfig};

/// Every recognised key with its default value and a short description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("model.backbone_channels", "16,32,64", "output channels of the stride-2 backbone blocks"),
    ("model.spatial_size", "4", "side of the final feature map"),
    ("model.embedding_dim", "64", "size of each branch embedding"),
    ("model.mask_dim", "64", "channels of the attribute feature map"),
    ("model.num_identities", "auto", "identity classes; auto = from the training manifest"),
    ("model.num_colors", "auto", "colour classes; auto = from the training manifest"),
    ("model.num_types", "auto", "type classes; auto = from the training manifest"),
    ("model.seed", "7", "parameter initialisation seed"),
    ("synth.num_identities", "8", "identities to render"),
    ("synth.images_per_identity", "4", "images per identity"),
    ("synth.num_colors", "3", "colour attribute classes"),
    ("synth.num_types", "2", "type attribute classes"),
    ("synth.num_cameras", "4", "camera ids"),
    ("synth.image_side", "32", "image width and height"),
    ("synth.noise_std", "0", "Gaussian pixel noise, fraction of full scale"),
    ("synth.seed", "0", "noise seed"),
    ("synth.train_fraction", "0", "if in (0, 1), also write identity-disjoint train.csv and test.csv"),
    ("data.manifest", "", "manifest CSV used by train and extract"),
    ("data.root", "", "directory image paths are relative to; empty = manifest directory"),
    ("train.batch_size", "32", "pairs per step"),
    ("train.epochs", "75", "total epochs"),
    ("train.lr_schedule", "50:0.1,25:0.01", "epochs:rate spans"),
    ("train.momentum", "0.9", "SGD momentum"),
    ("train.weight_decay", "0.0005", "L2 weight decay"),
    ("train.checkpoint_every", "1", "epochs between checkpoints"),
    ("train.pairs_per_epoch", "auto", "pairs drawn per epoch; auto = training image count"),
    ("train.positive_fraction", "0.5", "share of same-identity pairs per batch"),
    ("train.grad_clip", "none", "maximum global gradient norm; none = unclipped"),
    ("train.seed", "0", "pair sampling seed"),
    ("train.resume", "", "checkpoint to continue from"),
    ("loss.lambda1", "0.5", "identity loss weight"),
    ("loss.lambda2", "0.5", "colour and type loss weight"),
    ("loss.lambda3", "1", "verification loss weight"),
    ("als.theta", "0.1", "smoothing weight of same-attribute pairs"),
    ("als.alpha", "0.1", "shift inside the smoothing logarithm"),
    ("als.beta", "1", "smoothing term multiplier"),
    ("fusion.alpha", "0.5", "category half is scaled by 1 - alpha"),
    ("extract.checkpoint", "", "checkpoint to extract with; empty = untrained model"),
    ("extract.source", "fused", "fused, category or attribute"),
    ("eval.features", "", "feature file holding one pool of images"),
    ("eval.query_features", "", "query feature file (with eval.gallery_features)"),
    ("eval.gallery_features", "", "gallery feature file (with eval.query_features)"),
    ("eval.protocol", "veri", "veri or vehicleid"),
    ("eval.gallery_size", "800", "identities in the vehicleid gallery"),
    ("eval.normalize", "false", "L2-normalise features before ranking"),
    ("eval.max_rank", "auto", "CMC length; auto = gallery size"),
    ("eval.seed", "0", "query/gallery selection seed"),
    ("gradcheck.instances", "20", "random instances per operation"),
    ("gradcheck.step", "0.0001", "central difference step"),
    ("gradcheck.branch_instances", "2", "whole-branch instances"),
    ("gradcheck.seed", "0", "instance seed"),
];

/// Keys `--seed` sets.
pub const SEED_KEYS: &[&str] = &["model.seed", "synth.seed", "train.seed", "eval.seed", "gradcheck.seed"];

/// Fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn nearest_key(key: &str) -> Option<String> {
    KEYS.iter()
        .map(|(k, _, _)| (strsim::levenshtein(key, k), *k))
        .min()
        .filter(|(d, k)| *d <= k.len().max(key.len()) / 2)
        .map(|(_, k)| k.to_string())
}

/// Splits `key=value`, trimming both sides.
pub fn parse_assignment(text: &str) -> Result<(String, String)> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got `{text}`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::UnknownKey {
                key: key.to_string(),
                suggestion: nearest_key(key),
            }),
        }
    }

    /// Applies `key = value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = parse_assignment(line).map_err(|_| Error::Parse {
                line: i as u64 + 1,
                message: format!("expected key = value, got `{line}`"),
            })?;
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("`{key}` is not a config key"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.get(key);
        raw.parse()
            .map_err(|e| Error::Config(format!("{key}: cannot parse `{raw}`: {e}")))
    }

    /// `None` for `auto`/`none`.
    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.get(key) {
            "auto" | "none" => Ok(None),
            _ => self.parse(key).map(Some),
        }
    }

    /// `None` for an empty value.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key).ok_or_else(|| Error::Config(format!("{key} must be set")))
    }

    /// Resolved `key = value` lines in key order, reloadable with [`Config::apply_text`].
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Model shape; `auto` label-space sizes fall back to `labels` when given
    /// and to the desk defaults otherwise.
    pub fn model(&self, labels: Option<(usize, usize, usize)>) -> Result<ModelConfig> {
        let desk = ModelConfig::default();
        let channels = self
            .get("model.backbone_channels")
            .split(',')
            .map(|c| c.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(format!("model.backbone_channels: {e}")))?;
        let (ids, colors, types) = labels.unwrap_or((desk.num_identities, desk.num_colors, desk.num_types));
        let cfg = ModelConfig {
            backbone_channels: channels,
            spatial_size: self.parse("model.spatial_size")?,
            num_identities: self.parse_opt("model.num_identities")?.unwrap_or(ids),
            num_colors: self.parse_opt("model.num_colors")?.unwrap_or(colors),
            num_types: self.parse_opt("model.num_types")?.unwrap_or(types),
            embedding_dim: self.parse("model.embedding_dim")?,
            mask_dim: self.parse("model.mask_dim")?,
            seed: self.parse("model.seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synthetic(&self) -> Result<SyntheticSpec> {
        let spec = SyntheticSpec {
            num_identities: self.parse("synth.num_identities")?,
            images_per_identity: self.parse("synth.images_per_identity")?,
            num_colors: self.parse("synth.num_colors")?,
            num_types: self.parse("synth.num_types")?,
            num_cameras: self.parse("synth.num_cameras")?,
            image_side: self.parse("synth.image_side")?,
            noise_std: self.parse("synth.noise_std")?,
            seed: self.parse("synth.seed")?,
            first_identity: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            batch_size: self.parse("train.batch_size")?,
            total_epochs: self.parse("train.epochs")?,
            lr_schedule: self.parse::<LrSchedule>("train.lr_schedule")?,
            momentum: self.parse("train.momentum")?,
            weight_decay: self.parse("train.weight_decay")?,
            weights: LossWeights {
                lambda1: self.parse("loss.lambda1")?,
                lambda2: self.parse("loss.lambda2")?,
                lambda3: self.parse("loss.lambda3")?,
            },
            als: AlsParams {
                theta: self.parse("als.theta")?,
                alpha: self.parse("als.alpha")?,
                beta: self.parse("als.beta")?,
            },
            seed: self.parse("train.seed")?,
            checkpoint_every: self.parse("train.checkpoint_every")?,
            pairs_per_epoch: self.parse_opt("train.pairs_per_epoch")?,
            positive_fraction: self.parse("train.positive_fraction")?,
            grad_clip: self.parse_opt("train.grad_clip")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fusion(&self) -> Result<FusionConfig> {
        let f = FusionConfig {
            alpha: self.parse("fusion.alpha")?,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn feature_source(&self) -> Result<FeatureSource> {
        self.parse("extract.source")
    }

    pub fn protocol(&self) -> Result<Protocol> {
        self.parse("eval.protocol")
    }

    pub fn gradcheck(&self) -> Result<GradCheckSettings> {
        Ok(GradCheckSettings {
            instances: self.parse("gradcheck.instances")?,
            step: self.parse("gradcheck.step")?,
            seed: self.parse("gradcheck.seed")?,
            branch_instances: self.parse("gradcheck.branch_instances")?,
            config: self.model(None)?,
            ..GradCheckSettings::default()
        })
    }
}

/// Defaults, then the file at `path` (if any), then `overrides` in order.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Config> {
    let mut cfg = Config::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)?;
        cfg.apply_text(&text)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}
