//! Soft guideline network and the difficulty-to-drop-ratio mapping.
//!
//! The SGNet is an independent small classifier fed with the raw input. The
//! variance of its softmax output measures how confident it is; confident
//! (easy) samples are mapped to a high expected drop ratio. It is only used
//! during training.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgadError};
use crate::network::NetworkConfig;
use crate::nn::{conv_tensors, linear_tensors, softmax, Conv2d, ConvCache, Feature, Linear, Parameters, TensorRef};

#[derive(Debug, Clone, PartialEq)]
pub struct SgNet {
    pub convs: Vec<Conv2d>,
    pub fc: Linear,
}

#[derive(Debug, Clone)]
pub struct SgCache {
    layers: Vec<(ConvCache, Feature)>,
    last: Feature,
    pooled: Vec<f32>,
}

impl SgNet {
    /// Conv layers of `cfg.sgnet_widths`; every second layer downsamples by 2.
    pub fn init(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let k = cfg.conv_kernel;
        let mut prev = cfg.in_channels;
        let convs = cfg
            .sgnet_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let stride = if i % 2 == 1 { 2 } else { 1 };
                let c = Conv2d::he_init(prev, w, k, stride, k / 2, 1.0, rng);
                prev = w;
                c
            })
            .collect();
        let fc = Linear::init(prev, cfg.num_classes, rng);
        Self { convs, fc }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            convs: self.convs.iter().map(Conv2d::zeros_like).collect(),
            fc: self.fc.zeros_like(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.fc.out_features
    }

    pub fn macs(&self, image_size: usize) -> u64 {
        let mut h = image_size;
        let mut total = 0;
        for c in &self.convs {
            total += c.macs(h, h);
            h = c.output_dims(h, h).0;
        }
        total + self.fc.macs()
    }

    pub fn logits_sample(&self, x: &Feature) -> Result<(Vec<f32>, SgCache)> {
        let mut layers = Vec::with_capacity(self.convs.len());
        let mut z = x.clone();
        for c in &self.convs {
            let (pre, cache) = c.forward(&z)?;
            z = pre.relu();
            layers.push((cache, pre));
        }
        let pooled = z.global_avg_pool();
        let logits = self.fc.forward(&pooled);
        Ok((logits, SgCache { layers, last: z, pooled }))
    }

    pub fn backward_sample(&self, cache: &SgCache, dlogits: &[f32], grads: &mut SgNet) {
        let dpooled = self.fc.backward(&cache.pooled, dlogits, &mut grads.fc);
        let last = &cache.last;
        let mut g = Feature::global_avg_pool_backward(&dpooled, last.channels, last.height, last.width);
        for (i, (conv, (cc, pre))) in self.convs.iter().zip(&cache.layers).enumerate().rev() {
            Feature::relu_backward_inplace(&mut g, pre);
            match conv.backward(cc, &g, &mut grads.convs[i], i > 0) {
                Some(dx) => g = dx,
                None => break,
            }
        }
    }

    /// `N x M` softmax rows.
    pub fn sgnet_forward(&self, inputs: &[Feature]) -> Result<Vec<Vec<f32>>> {
        inputs
            .iter()
            .map(|x| Ok(softmax(&self.logits_sample(x)?.0)))
            .collect()
    }
}

impl Parameters for SgNet {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            conv_tensors(&format!("sgnet.conv{i}"), c, &mut out);
        }
        linear_tensors("sgnet.fc", &self.fc, &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.fc.weight);
        out.push(&mut self.fc.bias);
        out
    }
}

/// `var = (1/M) * sum_i (p_i - 1/M)^2` for one probability row.
pub fn row_variance<T: Copy + Into<f64>>(probs: &[T]) -> f64 {
    let m = probs.len() as f64;
    probs.iter().map(|&p| (p.into() - 1.0 / m).powi(2)).sum::<f64>() / m
}

/// Deviation form of the soft-target variance, one entry per row.
pub fn soft_target_variance(probs: &[Vec<f32>]) -> Vec<f64> {
    probs.iter().map(|row| row_variance(row)).collect()
}

/// Exponential form of the same quantity computed from logits:
/// `sum_i e^{2 s_i} / (M (sum_j e^{s_j})^2) - 1/M^2`.
pub fn variance_from_logits(logits: &[f64]) -> f64 {
    let m = logits.len() as f64;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|s| (s - max).exp()).sum();
    let sum_sq: f64 = logits.iter().map(|s| (2.0 * (s - max)).exp()).sum();
    sum_sq / (m * sum * sum) - 1.0 / (m * m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MappingMode {
    /// `scale = -M ln(1 - s_max) / ln L`, so the mapping spans `[0, s_max]`.
    Consistent,
    /// `scale = -M ln(s_max) / ln L`, spanning `[0, 1 - s_max]`.
    LogSmax,
}

impl fmt::Display for MappingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MappingMode::Consistent => "consistent",
            MappingMode::LogSmax => "log-smax",
        })
    }
}

impl FromStr for MappingMode {
    type Err = SgadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "consistent" => Ok(MappingMode::Consistent),
            "log-smax" => Ok(MappingMode::LogSmax),
            other => Err(SgadError::Config(format!(
                "unknown mapping mode {other:?} (expected consistent or log-smax)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingConfig {
    pub s_max: f64,
    pub num_blocks: usize,
    pub num_classes: usize,
    pub mode: MappingMode,
}

impl MappingConfig {
    pub fn new(s_max: f64, num_blocks: usize, num_classes: usize, mode: MappingMode) -> Result<Self> {
        if !(s_max > 0.0 && s_max < 1.0) {
            return Err(SgadError::Config(format!("s_max must lie in (0, 1), got {s_max}")));
        }
        if num_blocks < 2 || num_classes < 2 {
            return Err(SgadError::Config(format!(
                "mapping needs L >= 2 and M >= 2, got L={num_blocks}, M={num_classes}"
            )));
        }
        Ok(Self {
            s_max,
            num_blocks,
            num_classes,
            mode,
        })
    }

    pub fn scale(&self) -> f64 {
        let m = self.num_classes as f64;
        let ln_l = (self.num_blocks as f64).ln();
        match self.mode {
            MappingMode::Consistent => -m * (1.0 - self.s_max).ln() / ln_l,
            MappingMode::LogSmax => -m * self.s_max.ln() / ln_l,
        }
    }

    /// `1 - L^{1 - scale*var} / L` for one variance value.
    pub fn map(&self, var: f64) -> Result<f64> {
        let upper = 1.0 / self.num_classes as f64;
        if !(0.0..=upper).contains(&var) {
            return Err(SgadError::Domain(format!("variance {var} outside [0, {upper}]")));
        }
        let l = self.num_blocks as f64;
        Ok(1.0 - l.powf(1.0 - self.scale() * var) / l)
    }
}

/// Expected drop ratio for each variance.
pub fn map_variance_to_drop_ratio(var: &[f64], cfg: &MappingConfig) -> Result<Vec<f64>> {
    var.iter().map(|&v| cfg.map(v)).collect()
}

/// SGNet outputs for a batch and the derived drop-ratio targets.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidelineBatch {
    pub softmax_probs: Vec<Vec<f32>>,
    pub variance: Vec<f64>,
    pub expected_drop: Vec<f64>,
}

impl GuidelineBatch {
    pub fn from_probs(softmax_probs: Vec<Vec<f32>>, cfg: &MappingConfig) -> Result<Self> {
        // f32 softmax can overshoot the open bound by rounding on near one-hot rows.
        let cap = (cfg.num_classes as f64 - 1.0) / (cfg.num_classes as f64).powi(2);
        let variance: Vec<f64> = soft_target_variance(&softmax_probs).into_iter().map(|v| v.min(cap)).collect();
        let expected_drop = map_variance_to_drop_ratio(&variance, cfg)?;
        Ok(Self {
            softmax_probs,
            variance,
            expected_drop,
        })
    }
}
