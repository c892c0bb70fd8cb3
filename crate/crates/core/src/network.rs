//! Architecture configuration shared by the backbone, BMNet and SGNet.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SgadError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    /// Output channels of each C-block; the stem emits `widths[0]`.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub conv_kernel: usize,
    pub bmnet_channels: usize,
    /// Average-pool factor applied to the stem output before the BMNet conv.
    pub bmnet_pool: usize,
    pub sgnet_widths: Vec<usize>,
    pub init_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::resnet(32).expect("depth 32 is a valid preset")
    }
}

/// One residual unit's static description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub index: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub spatial_stride: usize,
    pub conv_kernel: usize,
}

impl BlockConfig {
    /// Blocks whose output shape differs from their input use a projection
    /// shortcut and cannot be bypassed.
    pub fn changes_shape(&self) -> bool {
        self.in_channels != self.out_channels || self.spatial_stride != 1
    }
}

impl NetworkConfig {
    /// CIFAR-style family: depth = 6n + 2, three C-blocks of n blocks with
    /// widths 16/32/64 on 32x32 inputs.
    pub fn resnet(depth: usize) -> Result<Self> {
        if depth < 8 || (depth - 2) % 6 != 0 {
            return Err(SgadError::Config(format!(
                "depth {depth} is not of the form 6n+2 with n >= 1"
            )));
        }
        Ok(Self {
            in_channels: 3,
            image_size: 32,
            num_classes: 10,
            widths: vec![16, 32, 64],
            blocks_per_stage: (depth - 2) / 6,
            conv_kernel: 3,
            bmnet_channels: 8,
            bmnet_pool: 4,
            sgnet_widths: vec![16, 16, 32, 32],
            init_seed: 0,
        })
    }

    pub fn depth(&self) -> usize {
        2 * self.num_blocks() + 2
    }

    pub fn num_blocks(&self) -> usize {
        self.widths.len() * self.blocks_per_stage
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SgadError::Config(msg));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("invalid channel progression {:?}", self.widths));
        }
        if self.widths.windows(2).any(|w| w[1] < w[0]) {
            return bad(format!(
                "invalid channel progression {:?}: widths must not shrink",
                self.widths
            ));
        }
        if self.num_blocks() < 2 {
            return bad(format!("need at least 2 blocks, got {}", self.num_blocks()));
        }
        if self.in_channels == 0 || self.num_classes < 2 {
            return bad("need at least one input channel and two classes".into());
        }
        if self.conv_kernel == 0 || self.conv_kernel % 2 == 0 {
            return bad(format!("conv kernel must be odd, got {}", self.conv_kernel));
        }
        let downsample = 1usize << (self.widths.len() - 1);
        if self.image_size == 0 || self.image_size % downsample != 0 {
            return bad(format!(
                "image size {} not divisible by total stride {downsample}",
                self.image_size
            ));
        }
        if self.bmnet_pool == 0 || self.image_size % self.bmnet_pool != 0 || self.bmnet_channels == 0 {
            return bad(format!(
                "BMNet pool factor {} must divide image size {}",
                self.bmnet_pool, self.image_size
            ));
        }
        if self.sgnet_widths.is_empty() || self.sgnet_widths.contains(&0) {
            return bad(format!("invalid SGNet widths {:?}", self.sgnet_widths));
        }
        Ok(())
    }

    pub fn block_configs(&self) -> Result<Vec<BlockConfig>> {
        self.validate()?;
        let mut blocks = Vec::with_capacity(self.num_blocks());
        let mut prev = self.widths[0];
        for (stage, &width) in self.widths.iter().enumerate() {
            for j in 0..self.blocks_per_stage {
                blocks.push(BlockConfig {
                    index: blocks.len(),
                    in_channels: prev,
                    out_channels: width,
                    spatial_stride: if j == 0 && stage > 0 { 2 } else { 1 },
                    conv_kernel: self.conv_kernel,
                });
                prev = width;
            }
        }
        Ok(blocks)
    }
}

/// Positions whose mask bit is pinned to 1: shape-changing blocks and the last block.
pub fn forced_positions(blocks: &[BlockConfig]) -> Vec<bool> {
    let last = blocks.len().saturating_sub(1);
    blocks
        .iter()
        .enumerate()
        .map(|(i, b)| i == last || b.changes_shape())
        .collect()
}
