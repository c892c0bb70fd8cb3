//! Binary mask network.
//!
//! Maps the stem output `z1` to one keep/drop bit per block:
//! `avgpool -> conv3x3/2 -> relu -> global pool -> fc -> (+noise) -> sigmoid -> round`.
//! Rounding uses a straight-through estimator in the backward pass.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgadError};
use crate::network::{forced_positions, BlockConfig, NetworkConfig};
use crate::nn::{conv_tensors, linear_tensors, sigmoid, Conv2d, ConvCache, Feature, Linear, Parameters, TensorRef};

/// Gaussian pre-sigmoid noise whose std ramps linearly with the epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_start: f32,
    pub sigma_end: f32,
    pub ramp_epochs: usize,
}

impl NoiseSchedule {
    /// Default ramp: 0 to 3 over the first two thirds of training.
    pub fn for_epochs(epochs: usize) -> Self {
        Self {
            sigma_start: 0.0,
            sigma_end: 3.0,
            ramp_epochs: (2 * epochs / 3).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_start >= 0.0 && self.sigma_end >= self.sigma_start && self.ramp_epochs > 0) {
            return Err(SgadError::Config(format!(
                "noise schedule needs 0 <= sigma_start <= sigma_end and ramp_epochs > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn sigma(&self, epoch: usize) -> f32 {
        let t = (epoch as f32 / self.ramp_epochs as f32).min(1.0);
        self.sigma_start + (self.sigma_end - self.sigma_start) * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Zero-mean Gaussian noise with std `sigma(epoch)`; all zeros in eval mode.
pub fn sample_noise(schedule: &NoiseSchedule, epoch: usize, mode: Mode, len: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let sigma = schedule.sigma(epoch);
    if mode == Mode::Eval || sigma == 0.0 {
        return vec![0.0; len];
    }
    let normal = Normal::new(0.0f32, sigma).expect("finite sigma");
    (0..len).map(|_| normal.sample(rng)).collect()
}

/// Rounds a sigmoid output; exactly 0.5 keeps the block.
pub fn binarize(x: f32) -> u8 {
    u8::from(x >= 0.5)
}

pub fn binarize_matrix(x: &[f32]) -> Vec<u8> {
    x.iter().map(|&v| binarize(v)).collect()
}

/// Straight-through backward of `round(sigmoid(a))` with `a = logit + noise`:
/// rounding passes the gradient unchanged, leaving the sigmoid derivative.
pub fn ste_backward(upstream: f32, noisy_logit: f32) -> f32 {
    // s(1 - s) written as e/(1 + e)^2 with e = exp(-|a|) avoids cancellation in 1 - s.
    let e = (-noisy_logit.abs()).exp();
    upstream * e / ((1.0 + e) * (1.0 + e))
}

/// Per-sample keep/drop decisions plus the tensors that produced them.
/// All matrices are row-major `num_samples x num_blocks`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBatch {
    pub num_samples: usize,
    pub num_blocks: usize,
    pub bits: Vec<u8>,
    pub pre_sigmoid: Vec<f32>,
    pub noise: Vec<f32>,
    pub sigmoid_out: Vec<f32>,
}

impl MaskBatch {
    /// A batch from explicit bits (no network behind it).
    pub fn from_bits(num_samples: usize, num_blocks: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != num_samples * num_blocks || bits.iter().any(|&b| b > 1) {
            return Err(SgadError::Structural(format!(
                "expected {num_samples}x{num_blocks} binary entries, got {} values",
                bits.len()
            )));
        }
        let sigmoid_out = bits.iter().map(|&b| b as f32).collect();
        Ok(Self {
            num_samples,
            num_blocks,
            bits,
            pre_sigmoid: vec![0.0; num_samples * num_blocks],
            noise: vec![0.0; num_samples * num_blocks],
            sigmoid_out,
        })
    }

    pub fn all_ones(num_samples: usize, num_blocks: usize) -> Self {
        Self::from_bits(num_samples, num_blocks, vec![1; num_samples * num_blocks]).expect("consistent shape")
    }

    /// Composes logits and noise into bits, pinning forced positions to 1.
    pub fn from_logits(num_samples: usize, logits: Vec<f32>, noise: Vec<f32>, forced: &[bool]) -> Self {
        let num_blocks = forced.len();
        let sigmoid_out: Vec<f32> = logits.iter().zip(&noise).map(|(l, e)| sigmoid(l + e)).collect();
        let bits = sigmoid_out
            .iter()
            .enumerate()
            .map(|(k, &s)| if forced[k % num_blocks] { 1 } else { binarize(s) })
            .collect();
        Self {
            num_samples,
            num_blocks,
            bits,
            pre_sigmoid: logits,
            noise,
            sigmoid_out,
        }
    }

    pub fn row(&self, n: usize) -> &[u8] {
        &self.bits[n * self.num_blocks..(n + 1) * self.num_blocks]
    }

    /// Fraction of samples keeping block `i`.
    pub fn keep_ratio(&self, i: usize) -> f32 {
        let kept = (0..self.num_samples).filter(|&n| self.bits[n * self.num_blocks + i] == 1).count();
        kept as f32 / self.num_samples.max(1) as f32
    }

    pub fn keep_ratios(&self) -> Vec<f32> {
        (0..self.num_blocks).map(|i| self.keep_ratio(i)).collect()
    }

    pub fn executed_counts(&self) -> Vec<usize> {
        (0..self.num_samples)
            .map(|n| self.row(n).iter().filter(|&&b| b == 1).count())
            .collect()
    }

    /// Fraction of sigmoid outputs inside `[0.05, 0.95]` (unsaturated decisions).
    pub fn unsaturated_fraction(&self) -> f32 {
        if self.sigmoid_out.is_empty() {
            return 0.0;
        }
        let mid = self.sigmoid_out.iter().filter(|&&s| (0.05..=0.95).contains(&s)).count();
        mid as f32 / self.sigmoid_out.len() as f32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BmNet {
    pub pool: usize,
    pub conv: Conv2d,
    pub fc: Linear,
    pub forced: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct BmCache {
    in_height: usize,
    in_width: usize,
    conv: ConvCache,
    conv_pre: Feature,
    pooled: Vec<f32>,
}

impl BmNet {
    pub fn init(cfg: &NetworkConfig, blocks: &[BlockConfig], rng: &mut ChaCha8Rng) -> Self {
        let conv = Conv2d::he_init(cfg.widths[0], cfg.bmnet_channels, 3, 2, 1, 1.0, rng);
        let fc = Linear::init(cfg.bmnet_channels, blocks.len(), rng);
        Self {
            pool: cfg.bmnet_pool,
            conv,
            fc,
            forced: forced_positions(blocks),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            pool: self.pool,
            conv: self.conv.zeros_like(),
            fc: self.fc.zeros_like(),
            forced: self.forced.clone(),
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.fc.out_features
    }

    /// MACs for a stem output of `height x width` (pooling excluded).
    pub fn macs(&self, height: usize, width: usize) -> u64 {
        self.conv.macs(height / self.pool, width / self.pool) + self.fc.macs()
    }

    pub fn logits_sample(&self, z1: &Feature) -> Result<(Vec<f32>, BmCache)> {
        let pooled_in = z1.avg_pool(self.pool);
        let (conv_pre, conv) = self.conv.forward(&pooled_in)?;
        let pooled = conv_pre.relu().global_avg_pool();
        let logits = self.fc.forward(&pooled);
        Ok((
            logits,
            BmCache {
                in_height: z1.height,
                in_width: z1.width,
                conv,
                conv_pre,
                pooled,
            },
        ))
    }

    /// Gradient of the mask logits pushed back to `z1`.
    pub fn backward_sample(&self, cache: &BmCache, dlogits: &[f32], grads: &mut BmNet) -> Feature {
        let dpooled = self.fc.backward(&cache.pooled, dlogits, &mut grads.fc);
        let pre = &cache.conv_pre;
        let mut g = Feature::global_avg_pool_backward(&dpooled, pre.channels, pre.height, pre.width);
        Feature::relu_backward_inplace(&mut g, pre);
        let dp = self
            .conv
            .backward(&cache.conv, &g, &mut grads.conv, true)
            .expect("input gradient requested");
        Feature::avg_pool_backward(&dp, self.pool, cache.in_height, cache.in_width)
    }

    /// `N x L` real logits, row-major.
    pub fn compute_mask_logits(&self, z1_batch: &[Feature]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(z1_batch.len() * self.num_blocks());
        for z1 in z1_batch {
            out.extend(self.logits_sample(z1)?.0);
        }
        Ok(out)
    }

    /// logits -> +noise -> sigmoid -> round -> forced bits.
    pub fn mask_batch(
        &self,
        z1_batch: &[Feature],
        schedule: &NoiseSchedule,
        epoch: usize,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<MaskBatch> {
        let logits = self.compute_mask_logits(z1_batch)?;
        let noise = sample_noise(schedule, epoch, mode, logits.len(), rng);
        Ok(MaskBatch::from_logits(z1_batch.len(), logits, noise, &self.forced))
    }

    /// Eval-mode bits for one sample.
    pub fn eval_bits(&self, z1: &Feature) -> Result<Vec<u8>> {
        let (logits, _) = self.logits_sample(z1)?;
        Ok(logits
            .iter()
            .zip(&self.forced)
            .map(|(&l, &f)| if f { 1 } else { binarize(sigmoid(l)) })
            .collect())
    }

    /// Copy whose mask head omits the listed block positions.
    pub fn without_outputs(&self, remove: &[usize]) -> BmNet {
        let keep: Vec<usize> = (0..self.num_blocks()).filter(|i| !remove.contains(i)).collect();
        BmNet {
            pool: self.pool,
            conv: self.conv.clone(),
            fc: self.fc.select_outputs(&keep),
            forced: keep.iter().map(|&i| self.forced[i]).collect(),
        }
    }
}

impl Parameters for BmNet {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        conv_tensors("bmnet.conv", &self.conv, &mut out);
        linear_tensors("bmnet.fc", &self.fc, &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        vec![&mut self.conv.weight, &mut self.conv.bias, &mut self.fc.weight, &mut self.fc.bias]
    }
}
