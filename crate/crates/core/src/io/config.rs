//! Flat `key = value` experiment configuration.

use std::collections::HashSet;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{GridSpec, StrideSet};
use crate::occupancy::ClassSet;
use crate::synth::SceneConfig;
use crate::trainer::TrainConfig;

/// Everything needed to regenerate data and retrain from scratch.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub train_samples: usize,
    pub eval_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        let mut train = TrainConfig::default();
        train.grid = scene.grid;
        train.frame_count = scene.frame_count;
        train.frame_interval = scene.frame_interval;
        train.seed = scene.seed;
        Self {
            scene,
            train,
            train_samples: 48,
            eval_samples: 16,
        }
    }
}

/// Every accepted key, in canonical order.
pub const KEYS: &[&str] = &[
    "seed",
    "train_samples",
    "eval_samples",
    "grid_height",
    "grid_width",
    "grid_depth",
    "voxel_size",
    "classes",
    "channels",
    "box_count_min",
    "box_count_max",
    "box_size_min",
    "box_size_max",
    "box_height_min",
    "box_height_max",
    "ego_speed_min",
    "ego_speed_max",
    "frame_count",
    "frame_interval",
    "ground_height",
    "road_half_width",
    "noise_sigma",
    "texture_sigma",
    "texture_length",
    "epochs",
    "batch_size",
    "learning_rate",
    "weight_decay",
    "lambda",
    "strides",
    "cvt_supervision",
    "baseline",
    "head_hidden",
    "head_first_kernel",
    "head_second_kernel",
    "excluded_classes",
    "eval_each_epoch",
    "log_train_miou",
    "cache_cost_volumes",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parses config text over the defaults. Unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "given more than once"));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its text value without cross-field validation.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.scene;
        let t = &mut self.train;
        match key {
            "seed" => {
                s.seed = parse_num(key, value)?;
                t.seed = s.seed;
            }
            "train_samples" => self.train_samples = parse_num(key, value)?,
            "eval_samples" => self.eval_samples = parse_num(key, value)?,
            "grid_height" => s.grid.height = parse_num(key, value)?,
            "grid_width" => s.grid.width = parse_num(key, value)?,
            "grid_depth" => s.grid.depth = parse_num(key, value)?,
            "voxel_size" => s.grid.voxel_size = parse_num(key, value)?,
            "classes" => {
                s.class_set = ClassSet::numbered(parse_num(key, value)?).map_err(|e| relabel(e, key))?
            }
            "channels" => s.channels = parse_num(key, value)?,
            "box_count_min" => s.box_count.0 = parse_num(key, value)?,
            "box_count_max" => s.box_count.1 = parse_num(key, value)?,
            "box_size_min" => s.box_size.0 = parse_num(key, value)?,
            "box_size_max" => s.box_size.1 = parse_num(key, value)?,
            "box_height_min" => s.box_height.0 = parse_num(key, value)?,
            "box_height_max" => s.box_height.1 = parse_num(key, value)?,
            "ego_speed_min" => s.ego_speed.0 = parse_num(key, value)?,
            "ego_speed_max" => s.ego_speed.1 = parse_num(key, value)?,
            "frame_count" => {
                s.frame_count = parse_num(key, value)?;
                t.frame_count = s.frame_count;
            }
            "frame_interval" => {
                s.frame_interval = parse_num(key, value)?;
                t.frame_interval = s.frame_interval;
            }
            "ground_height" => s.ground_height = parse_num(key, value)?,
            "road_half_width" => s.road_half_width = parse_num(key, value)?,
            "noise_sigma" => s.noise_sigma = parse_num(key, value)?,
            "texture_sigma" => s.texture_sigma = parse_num(key, value)?,
            "texture_length" => s.texture_length = parse_num(key, value)?,
            "epochs" => t.epochs = parse_num(key, value)?,
            "batch_size" => t.batch_size = parse_num(key, value)?,
            "learning_rate" => t.learning_rate = parse_num(key, value)?,
            "weight_decay" => t.weight_decay = parse_num(key, value)?,
            "lambda" => t.lambda = parse_num(key, value)?,
            "strides" => {
                t.strides = StrideSet::new(parse_list(key, value)?).map_err(|e| relabel(e, key))?
            }
            "cvt_supervision" => t.cvt_supervision = parse_bool(key, value)?,
            "baseline" => t.baseline = parse_bool(key, value)?,
            "head_hidden" => t.head_hidden = parse_num(key, value)?,
            "head_first_kernel" => t.head_first_kernel = parse_num(key, value)?,
            "head_second_kernel" => t.head_second_kernel = parse_num(key, value)?,
            "excluded_classes" => t.excluded_classes = parse_list(key, value)?,
            "eval_each_epoch" => t.eval_each_epoch = parse_bool(key, value)?,
            "log_train_miou" => t.log_train_miou = parse_bool(key, value)?,
            "cache_cost_volumes" => t.cache_cost_volumes = parse_bool(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        t.grid = s.grid;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        if self.train_samples == 0 {
            return Err(Error::config("train_samples", "must be positive"));
        }
        if self.train.excluded_classes.iter().any(|&c| c as usize >= self.scene.class_set.len()) {
            return Err(Error::config("excluded_classes", "class index out of range"));
        }
        if self.train.grid != self.scene.grid
            || self.train.frame_count != self.scene.frame_count
            || self.train.frame_interval != self.scene.frame_interval
            || self.train.seed != self.scene.seed
        {
            return Err(Error::config("grid", "scene and training settings disagree"));
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let s = &self.scene;
        let t = &self.train;
        match key {
            "seed" => s.seed.to_string(),
            "train_samples" => self.train_samples.to_string(),
            "eval_samples" => self.eval_samples.to_string(),
            "grid_height" => s.grid.height.to_string(),
            "grid_width" => s.grid.width.to_string(),
            "grid_depth" => s.grid.depth.to_string(),
            "voxel_size" => s.grid.voxel_size.to_string(),
            "classes" => s.class_set.semantic_count().to_string(),
            "channels" => s.channels.to_string(),
            "box_count_min" => s.box_count.0.to_string(),
            "box_count_max" => s.box_count.1.to_string(),
            "box_size_min" => s.box_size.0.to_string(),
            "box_size_max" => s.box_size.1.to_string(),
            "box_height_min" => s.box_height.0.to_string(),
            "box_height_max" => s.box_height.1.to_string(),
            "ego_speed_min" => s.ego_speed.0.to_string(),
            "ego_speed_max" => s.ego_speed.1.to_string(),
            "frame_count" => s.frame_count.to_string(),
            "frame_interval" => s.frame_interval.to_string(),
            "ground_height" => s.ground_height.to_string(),
            "road_half_width" => s.road_half_width.to_string(),
            "noise_sigma" => s.noise_sigma.to_string(),
            "texture_sigma" => s.texture_sigma.to_string(),
            "texture_length" => s.texture_length.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "lambda" => t.lambda.to_string(),
            "strides" => join(t.strides.as_slice()),
            "cvt_supervision" => t.cvt_supervision.to_string(),
            "baseline" => t.baseline.to_string(),
            "head_hidden" => t.head_hidden.to_string(),
            "head_first_kernel" => t.head_first_kernel.to_string(),
            "head_second_kernel" => t.head_second_kernel.to_string(),
            "excluded_classes" => join(&t.excluded_classes),
            "eval_each_epoch" => t.eval_each_epoch.to_string(),
            "log_train_miou" => t.log_train_miou.to_string(),
            "cache_cost_volumes" => t.cache_cost_volumes.to_string(),
            _ => unreachable!("key list and accessor out of sync: {key}"),
        }
    }

    /// Canonical text; `parse(to_text())` returns an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }

    pub fn hash(&self) -> String {
        config_hash(&self.to_text())
    }

    /// Grid dimensions as a separate spec for callers that only need geometry.
    pub fn grid(&self) -> GridSpec {
        self.scene.grid
    }
}

fn relabel(e: Error, key: &str) -> Error {
    match e {
        Error::Config { message, .. } => Error::config(key, message),
        other => other,
    }
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
