//! Residual backbone whose blocks can be bypassed per sample.
//!
//! Block `i` computes `z' = z + m * f(z)` with `f = conv2(relu(conv1(z)))`.
//! Blocks that change channel count or resolution use a 1x1 projection on
//! the shortcut and always execute. The head is `relu -> global average pool
//! -> fully-connected`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bmnet::MaskBatch;
use crate::error::{Result, SgadError};
use crate::network::{forced_positions, BlockConfig, NetworkConfig};
use crate::nn::{conv_tensors, linear_tensors, Conv2d, ConvCache, Feature, Linear, Parameters, TensorRef};

const HALF: f32 = std::f32::consts::FRAC_1_SQRT_2;

pub const INIT_SCHEME: &str =
    "he-normal stem conv; residual first conv and projection at gain 1/sqrt(2), \
     second conv at gain 1/sqrt(L); normal(0, 1/fan_in) fully-connected weights, zero biases, ChaCha8 stream per network";

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub config: BlockConfig,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub projection: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct BranchCache {
    conv1: ConvCache,
    hidden_pre: Feature,
    conv2: ConvCache,
    /// `f(z)`, needed for the mask gradient `<dL/dz', f(z)>`.
    output: Feature,
}

#[derive(Debug, Clone)]
enum BlockTrace {
    Executed {
        branch: BranchCache,
        projection: Option<ConvCache>,
    },
    Skipped {
        branch_output: Option<Feature>,
    },
}

/// Whether a forward pass keeps what backward needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassMode {
    /// No caches; dropped blocks are not evaluated at all.
    Inference,
    /// Caches for executed blocks; dropped droppable blocks still evaluate
    /// `f(z)` so the keep/drop decision receives a gradient.
    Train,
    /// Caches for executed blocks only; no gradient is routed to mask bits.
    TrainFrozenMask,
}

#[derive(Debug, Clone)]
pub struct StemCache {
    conv: ConvCache,
    pre: Feature,
}

#[derive(Debug, Clone)]
pub struct BackboneTrace {
    blocks: Vec<BlockTrace>,
    last: Feature,
    pooled: Vec<f32>,
}

/// Batch output: one logit vector and one pre-logit feature map per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneOutput {
    pub logits: Vec<Vec<f32>>,
    pub pre_logit_features: Vec<Feature>,
}

impl ResidualBlock {
    fn init(config: BlockConfig, branch_gain: f32, rng: &mut ChaCha8Rng) -> Self {
        let k = config.conv_kernel;
        let pad = k / 2;
        // z is not rectified, so the He gain of 2 would double its variance.
        let conv1 = Conv2d::he_init(config.in_channels, config.out_channels, k, config.spatial_stride, pad, HALF, rng);
        let conv2 = Conv2d::he_init(config.out_channels, config.out_channels, k, 1, pad, branch_gain, rng);
        let projection = config.changes_shape().then(|| {
            Conv2d::he_init(config.in_channels, config.out_channels, 1, config.spatial_stride, 0, HALF, rng)
        });
        Self {
            config,
            conv1,
            conv2,
            projection,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            projection: self.projection.as_ref().map(Conv2d::zeros_like),
        }
    }

    pub fn is_forced(&self) -> bool {
        self.config.changes_shape()
    }

    fn branch(&self, z: &Feature) -> Result<(Feature, BranchCache)> {
        let (hidden_pre, c1) = self.conv1.forward(z)?;
        let (out, c2) = self.conv2.forward(&hidden_pre.relu())?;
        Ok((
            out.clone(),
            BranchCache {
                conv1: c1,
                hidden_pre,
                conv2: c2,
                output: out,
            },
        ))
    }

    /// The residual branch `f(z)` alone.
    pub fn branch_output(&self, z: &Feature) -> Result<Feature> {
        let (hidden, _) = self.conv1.forward(z)?;
        Ok(self.conv2.forward(&hidden.relu())?.0)
    }

    fn shortcut(&self, z: &Feature) -> Result<(Feature, Option<ConvCache>)> {
        match &self.projection {
            Some(p) => {
                let (out, cache) = p.forward(z)?;
                Ok((out, Some(cache)))
            }
            None => Ok((z.clone(), None)),
        }
    }

    fn check_input(&self, z: &Feature) -> Result<()> {
        if z.channels != self.config.in_channels {
            return Err(SgadError::Structural(format!(
                "block {} expects {} channels, got {}",
                self.config.index, self.config.in_channels, z.channels
            )));
        }
        Ok(())
    }

    fn forward_traced(&self, z: Feature, bit: u8, mode: PassMode) -> Result<(Feature, BlockTrace)> {
        self.check_input(&z)?;
        if bit == 1 || self.is_forced() {
            let (f, branch) = self.branch(&z)?;
            let (mut out, projection) = self.shortcut(&z)?;
            out.add_assign(&f);
            return Ok((out, BlockTrace::Executed { branch, projection }));
        }
        let branch_output = match mode {
            PassMode::Train => Some(self.branch_output(&z)?),
            _ => None,
        };
        Ok((z, BlockTrace::Skipped { branch_output }))
    }

    /// Backpropagates `grad` (w.r.t. the block output) to the block input.
    /// Returns the input gradient and the gradient w.r.t. the mask bit.
    fn backward(&self, trace: &BlockTrace, grad: Feature, grads: &mut ResidualBlock) -> (Feature, f32) {
        match trace {
            BlockTrace::Skipped { branch_output } => {
                let dmask = branch_output.as_ref().map_or(0.0, |f| grad.dot(f));
                (grad, dmask)
            }
            BlockTrace::Executed { branch, projection } => {
                let dmask = if self.is_forced() { 0.0 } else { grad.dot(&branch.output) };
                let mut dh = self
                    .conv2
                    .backward(&branch.conv2, &grad, &mut grads.conv2, true)
                    .expect("input gradient requested");
                Feature::relu_backward_inplace(&mut dh, &branch.hidden_pre);
                let mut dz = self
                    .conv1
                    .backward(&branch.conv1, &dh, &mut grads.conv1, true)
                    .expect("input gradient requested");
                match (&self.projection, projection) {
                    (Some(p), Some(cache)) => {
                        let gp = grads.projection.as_mut().expect("projection gradient slot");
                        let ds = p.backward(cache, &grad, gp, true).expect("input gradient requested");
                        dz.add_assign(&ds);
                    }
                    _ => dz.add_assign(&grad),
                }
                (dz, dmask)
            }
        }
    }
}

/// `z' = z + m * f(z)`: bit 0 returns `z` untouched, bit 1 the full residual
/// output. Shape-changing blocks ignore the bit and always execute.
pub fn masked_block_forward(z: &Feature, mask_bit: u8, block: &ResidualBlock) -> Result<Feature> {
    if mask_bit > 1 {
        return Err(SgadError::Structural(format!("mask bit must be 0 or 1, got {mask_bit}")));
    }
    Ok(block.forward_traced(z.clone(), mask_bit, PassMode::Inference)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub in_channels: usize,
    pub image_size: usize,
    pub stem: Conv2d,
    pub blocks: Vec<ResidualBlock>,
    pub head: Linear,
}

impl Backbone {
    /// Builds and initializes the backbone from `cfg.init_seed`.
    pub fn build(cfg: &NetworkConfig) -> Result<Self> {
        let blocks = cfg.block_configs()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        Ok(Self::from_blocks(cfg, &blocks, &mut rng))
    }

    pub fn from_blocks(cfg: &NetworkConfig, blocks: &[BlockConfig], rng: &mut ChaCha8Rng) -> Self {
        let k = cfg.conv_kernel;
        let stem = Conv2d::he_init(cfg.in_channels, cfg.widths[0], k, 1, k / 2, 1.0, rng);
        let gain = 1.0 / (blocks.len() as f32).sqrt();
        let blocks: Vec<ResidualBlock> = blocks.iter().map(|b| ResidualBlock::init(*b, gain, rng)).collect();
        let last = blocks.last().map_or(cfg.widths[0], |b| b.config.out_channels);
        let head = Linear::init(last, cfg.num_classes, rng);
        Self {
            in_channels: cfg.in_channels,
            image_size: cfg.image_size,
            stem,
            blocks,
            head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            in_channels: self.in_channels,
            image_size: self.image_size,
            stem: self.stem.zeros_like(),
            blocks: self.blocks.iter().map(ResidualBlock::zeros_like).collect(),
            head: self.head.zeros_like(),
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_features
    }

    pub fn block_configs(&self) -> Vec<BlockConfig> {
        self.blocks.iter().map(|b| b.config).collect()
    }

    pub fn forced(&self) -> Vec<bool> {
        forced_positions(&self.block_configs())
    }

    pub fn stem_forward(&self, x: &Feature) -> Result<(Feature, StemCache)> {
        if x.shape() != (self.in_channels, self.image_size, self.image_size) {
            return Err(SgadError::Structural(format!(
                "input shape {:?} does not match {}x{}x{}",
                x.shape(),
                self.in_channels,
                self.image_size,
                self.image_size
            )));
        }
        let (pre, conv) = self.stem.forward(x)?;
        Ok((pre.relu(), StemCache { conv, pre }))
    }

    pub fn stem_backward(&self, cache: &StemCache, mut dz1: Feature, grads: &mut Backbone) {
        Feature::relu_backward_inplace(&mut dz1, &cache.pre);
        self.stem.backward(&cache.conv, &dz1, &mut grads.stem, false);
    }

    fn check_bits(&self, bits: &[u8]) -> Result<()> {
        if bits.len() != self.blocks.len() {
            return Err(SgadError::Structural(format!(
                "mask has {} bits, backbone has {} blocks",
                bits.len(),
                self.blocks.len()
            )));
        }
        Ok(())
    }

    /// Runs the blocks and head from the stem output `z1`.
    pub fn forward_from_stem(&self, z1: Feature, bits: &[u8], mode: PassMode) -> Result<(Vec<f32>, BackboneTrace)> {
        self.check_bits(bits)?;
        let keep_traces = mode != PassMode::Inference;
        let mut z = z1;
        let mut traces = Vec::with_capacity(if keep_traces { self.blocks.len() } else { 0 });
        for (block, &bit) in self.blocks.iter().zip(bits) {
            let (next, trace) = block.forward_traced(z, bit, mode)?;
            if keep_traces {
                traces.push(trace);
            }
            z = next;
        }
        let pooled = z.relu().global_avg_pool();
        let logits = self.head.forward(&pooled);
        Ok((
            logits,
            BackboneTrace {
                blocks: traces,
                last: z,
                pooled,
            },
        ))
    }

    /// Backpropagates from the logits to the stem output. `dmask[i]` receives
    /// the gradient w.r.t. mask bit `i` (zero for forced or frozen positions).
    pub fn backward_to_stem(&self, trace: &BackboneTrace, dlogits: &[f32], grads: &mut Backbone, dmask: &mut [f32]) -> Feature {
        let dpooled = self.head.backward(&trace.pooled, dlogits, &mut grads.head);
        let last = &trace.last;
        let mut g = Feature::global_avg_pool_backward(&dpooled, last.channels, last.height, last.width);
        Feature::relu_backward_inplace(&mut g, last);
        for (i, (block, bt)) in self.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            let (dz, dm) = block.backward(bt, g, &mut grads.blocks[i]);
            dmask[i] = dm;
            g = dz;
        }
        g
    }

    /// Inference for one sample.
    pub fn forward_sample(&self, x: &Feature, bits: &[u8]) -> Result<(Vec<f32>, Feature)> {
        let (z1, _) = self.stem_forward(x)?;
        let (logits, trace) = self.forward_from_stem(z1, bits, PassMode::Inference)?;
        Ok((logits, trace.last))
    }

    /// Masked forward over a batch; each sample follows its own mask row.
    pub fn forward_backbone(&self, inputs: &[Feature], masks: &MaskBatch) -> Result<BackboneOutput> {
        if masks.num_blocks != self.blocks.len() {
            return Err(SgadError::Structural(format!(
                "mask batch has {} columns, backbone has {} blocks",
                masks.num_blocks,
                self.blocks.len()
            )));
        }
        if masks.num_samples != inputs.len() {
            return Err(SgadError::Structural(format!(
                "mask batch has {} rows for {} inputs",
                masks.num_samples,
                inputs.len()
            )));
        }
        let mut out = BackboneOutput {
            logits: Vec::with_capacity(inputs.len()),
            pre_logit_features: Vec::with_capacity(inputs.len()),
        };
        for (n, x) in inputs.iter().enumerate() {
            let (logits, features) = self.forward_sample(x, masks.row(n))?;
            out.logits.push(logits);
            out.pre_logit_features.push(features);
        }
        Ok(out)
    }

    /// Parameter count of block `i` (all of its convolutions).
    pub fn block_parameters(&self, i: usize) -> usize {
        let b = &self.blocks[i];
        let conv = |c: &Conv2d| c.weight.len() + c.bias.len();
        conv(&b.conv1) + conv(&b.conv2) + b.projection.as_ref().map_or(0, conv)
    }

    /// Per-block sum of absolute parameter values (used on gradient copies).
    pub fn block_l1(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .map(|b| {
                let mut s = 0.0f64;
                let mut add = |c: &Conv2d| {
                    s += c.weight.iter().chain(&c.bias).map(|v| v.abs() as f64).sum::<f64>();
                };
                add(&b.conv1);
                add(&b.conv2);
                if let Some(p) = &b.projection {
                    add(p);
                }
                s
            })
            .collect()
    }

    /// Copy without the listed blocks; indices refer to current positions.
    pub fn without_blocks(&self, remove: &[usize]) -> Backbone {
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .filter(|(i, _)| !remove.contains(i))
            .map(|(_, b)| b.clone())
            .collect();
        Backbone {
            blocks,
            ..self.clone()
        }
    }
}

impl Parameters for Backbone {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        conv_tensors("stem", &self.stem, &mut out);
        for b in &self.blocks {
            let p = format!("block{}", b.config.index);
            conv_tensors(&format!("{p}.conv1"), &b.conv1, &mut out);
            conv_tensors(&format!("{p}.conv2"), &b.conv2, &mut out);
            if let Some(proj) = &b.projection {
                conv_tensors(&format!("{p}.projection"), proj, &mut out);
            }
        }
        linear_tensors("head", &self.head, &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = vec![&mut self.stem.weight, &mut self.stem.bias];
        for b in &mut self.blocks {
            out.push(&mut b.conv1.weight);
            out.push(&mut b.conv1.bias);
            out.push(&mut b.conv2.weight);
            out.push(&mut b.conv2.bias);
            if let Some(p) = &mut b.projection {
                out.push(&mut p.weight);
                out.push(&mut p.bias);
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }
}
