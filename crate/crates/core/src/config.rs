//! Experiment configuration and its flat `key = value` text format.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors. Lists are comma separated.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bmnet::NoiseSchedule;
use crate::data::{DataSource, DatasetSpec};
use crate::error::{Result, SgadError};
use crate::loss::LossConfig;
use crate::model::MaskMode;
use crate::network::NetworkConfig;
use crate::sgnet::{MappingConfig, MappingMode};
use crate::trainer::{TrainConfig, TrainPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingSettings {
    pub s_max: f64,
    pub mode: MappingMode,
}

impl Default for MappingSettings {
    fn default() -> Self {
        Self {
            s_max: 0.2,
            mode: MappingMode::Consistent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub mapping: MappingSettings,
    pub noise: NoiseSchedule,
    pub data: DatasetSpec,
    pub mask_mode: MaskMode,
    pub include_bmnet_flops: bool,
    pub output_dir: PathBuf,
    /// Checkpoint used by eval/analyze/prune/export, and as warm start for train.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            network: NetworkConfig::default(),
            noise: NoiseSchedule::for_epochs(train.epochs),
            train,
            loss: LossConfig::default(),
            mapping: MappingSettings::default(),
            data: DatasetSpec::default(),
            mask_mode: MaskMode::Adaptive,
            include_bmnet_flops: true,
            output_dir: PathBuf::from("runs/default"),
            checkpoint: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| SgadError::Config(format!("cannot parse {key} = {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Depth-26 desk-scale setup: widths 8/16/32 on synthetic 3x16x16 data.
    pub fn desk(s_max: f64) -> Self {
        let mut cfg = Self::default();
        cfg.network.widths = vec![8, 16, 32];
        cfg.network.blocks_per_stage = 4;
        cfg.network.image_size = 16;
        cfg.network.sgnet_widths = vec![8, 8, 16, 16];
        cfg.train.epochs = 40;
        cfg.train.decay_epochs = vec![23, 29, 35];
        cfg.train.grad_clip = Some(1.0);
        cfg.data.noise = 1.0;
        cfg.noise = NoiseSchedule::for_epochs(40);
        cfg.mapping.s_max = s_max;
        cfg.output_dir = PathBuf::from("runs/desk");
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.noise.validate()?;
        self.mapping_config()?;
        if self.data.train_size == 0 || self.data.test_size == 0 {
            return Err(SgadError::Config("dataset split sizes must be positive".into()));
        }
        if self.data.mean.len() != self.network.in_channels || self.data.std.len() != self.network.in_channels {
            return Err(SgadError::Config(format!(
                "normalization needs {} channel constants",
                self.network.in_channels
            )));
        }
        Ok(())
    }

    pub fn mapping_config(&self) -> Result<MappingConfig> {
        MappingConfig::new(
            self.mapping.s_max,
            self.network.num_blocks(),
            self.network.num_classes,
            self.mapping.mode,
        )
    }

    pub fn plan(&self) -> Result<TrainPlan> {
        Ok(TrainPlan {
            train: self.train.clone(),
            loss: self.loss,
            mapping: self.mapping_config()?,
            noise: self.noise,
            mask_mode: self.mask_mode,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SgadError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses `key = value` lines on top of the defaults. When
    /// `noise.ramp_epochs` is not given it follows `train.epochs`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SgadError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(SgadError::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            cfg.set(key, value)?;
        }
        if !seen.contains("noise.ramp_epochs") {
            cfg.noise.ramp_epochs = NoiseSchedule::for_epochs(cfg.train.epochs).ramp_epochs;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let n = &mut self.network;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "network.depth" => {
                let depth: usize = parse(key, value)?;
                if depth < 8 || (depth - 2) % 6 != 0 {
                    return Err(SgadError::Config(format!("network.depth {depth} is not 6n+2")));
                }
                n.blocks_per_stage = (depth - 2) / 6;
            }
            "network.blocks_per_stage" => n.blocks_per_stage = parse(key, value)?,
            "network.in_channels" => n.in_channels = parse(key, value)?,
            "network.image_size" => n.image_size = parse(key, value)?,
            "network.num_classes" => n.num_classes = parse(key, value)?,
            "network.widths" => n.widths = parse_list(key, value)?,
            "network.conv_kernel" => n.conv_kernel = parse(key, value)?,
            "network.bmnet_channels" => n.bmnet_channels = parse(key, value)?,
            "network.bmnet_pool" => n.bmnet_pool = parse(key, value)?,
            "network.sgnet_widths" => n.sgnet_widths = parse_list(key, value)?,
            "network.init_seed" => n.init_seed = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.base_lr" => t.base_lr = parse(key, value)?,
            "train.decay_epochs" => t.decay_epochs = parse_list(key, value)?,
            "train.decay_factor" => t.decay_factor = parse(key, value)?,
            "train.momentum" => t.momentum = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.grad_log_start_epoch" => {
                t.grad_log_start_epoch = if value == "auto" { None } else { Some(parse(key, value)?) }
            }
            "train.augment" => t.augment = parse(key, value)?,
            "train.grad_clip" => t.grad_clip = if value == "off" { None } else { Some(parse(key, value)?) },
            "loss.alpha" => self.loss.alpha = parse(key, value)?,
            "loss.alpha_m" => self.loss.alpha_m = parse(key, value)?,
            "loss.alpha_g" => self.loss.alpha_g = parse(key, value)?,
            "mapping.s_max" => self.mapping.s_max = parse(key, value)?,
            "mapping.mode" => self.mapping.mode = value.parse()?,
            "noise.sigma_start" => self.noise.sigma_start = parse(key, value)?,
            "noise.sigma_end" => self.noise.sigma_end = parse(key, value)?,
            "noise.ramp_epochs" => self.noise.ramp_epochs = parse(key, value)?,
            "data.source" => d.source = value.parse::<DataSource>()?,
            "data.path" => d.path = if value.is_empty() { None } else { Some(value.to_string()) },
            "data.seed" => d.seed = parse(key, value)?,
            "data.train_size" => d.train_size = parse(key, value)?,
            "data.test_size" => d.test_size = parse(key, value)?,
            "data.mean" => d.mean = parse_list(key, value)?,
            "data.std" => d.std = parse_list(key, value)?,
            "data.difficulty_mix" => d.difficulty_mix = parse(key, value)?,
            "data.noise" => d.noise = parse(key, value)?,
            "mask_mode" => self.mask_mode = value.parse()?,
            "include_bmnet_flops" => self.include_bmnet_flops = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "checkpoint" => self.checkpoint = if value.is_empty() { None } else { Some(PathBuf::from(value)) },
            other => return Err(SgadError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every key, in a form [`ExperimentConfig::parse`] reads back unchanged.
    pub fn to_text(&self) -> String {
        let n = &self.network;
        let t = &self.train;
        let d = &self.data;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("network.blocks_per_stage", n.blocks_per_stage.to_string());
        kv("network.in_channels", n.in_channels.to_string());
        kv("network.image_size", n.image_size.to_string());
        kv("network.num_classes", n.num_classes.to_string());
        kv("network.widths", join(&n.widths));
        kv("network.conv_kernel", n.conv_kernel.to_string());
        kv("network.bmnet_channels", n.bmnet_channels.to_string());
        kv("network.bmnet_pool", n.bmnet_pool.to_string());
        kv("network.sgnet_widths", join(&n.sgnet_widths));
        kv("network.init_seed", n.init_seed.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.base_lr", t.base_lr.to_string());
        kv("train.decay_epochs", join(&t.decay_epochs));
        kv("train.decay_factor", t.decay_factor.to_string());
        kv("train.momentum", t.momentum.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.seed", t.seed.to_string());
        kv(
            "train.grad_log_start_epoch",
            t.grad_log_start_epoch.map_or("auto".into(), |e| e.to_string()),
        );
        kv("train.augment", t.augment.to_string());
        kv("train.grad_clip", t.grad_clip.map_or("off".into(), |c| c.to_string()));
        kv("loss.alpha", self.loss.alpha.to_string());
        kv("loss.alpha_m", self.loss.alpha_m.to_string());
        kv("loss.alpha_g", self.loss.alpha_g.to_string());
        kv("mapping.s_max", self.mapping.s_max.to_string());
        kv("mapping.mode", self.mapping.mode.to_string());
        kv("noise.sigma_start", self.noise.sigma_start.to_string());
        kv("noise.sigma_end", self.noise.sigma_end.to_string());
        kv("noise.ramp_epochs", self.noise.ramp_epochs.to_string());
        kv("data.source", d.source.to_string());
        kv("data.path", d.path.clone().unwrap_or_default());
        kv("data.seed", d.seed.to_string());
        kv("data.train_size", d.train_size.to_string());
        kv("data.test_size", d.test_size.to_string());
        kv("data.mean", join(&d.mean));
        kv("data.std", join(&d.std));
        kv("data.difficulty_mix", d.difficulty_mix.to_string());
        kv("data.noise", d.noise.to_string());
        kv("mask_mode", self.mask_mode.to_string());
        kv("include_bmnet_flops", self.include_bmnet_flops.to_string());
        kv("output_dir", self.output_dir.display().to_string());
        kv(
            "checkpoint",
            self.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        s
    }
}
