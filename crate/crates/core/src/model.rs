use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, PassMode};
use crate::bmnet::BmNet;
use crate::error::{Result, SgadError};
use crate::network::NetworkConfig;
use crate::nn::{Feature, Parameters, TensorRef};
use crate::sgnet::SgNet;

/// How mask bits are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Bits come from the BMNet.
    Adaptive,
    /// Every block always executes: the plain residual network baseline.
    AllKeep,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Adaptive => "adaptive",
            MaskMode::AllKeep => "all-keep",
        })
    }
}

impl FromStr for MaskMode {
    type Err = SgadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(MaskMode::Adaptive),
            "all-keep" => Ok(MaskMode::AllKeep),
            other => Err(SgadError::Config(format!("unknown mask mode {other:?}"))),
        }
    }
}

/// Backbone, mask network and (during training) the guideline network.
#[derive(Debug, Clone, PartialEq)]
pub struct SgadModel {
    pub backbone: Backbone,
    pub bmnet: BmNet,
    /// Absent in exported inference artifacts.
    pub sgnet: Option<SgNet>,
}

impl SgadModel {
    /// Each sub-network draws from its own ChaCha8 stream of `cfg.init_seed`.
    pub fn build(cfg: &NetworkConfig) -> Result<Self> {
        let blocks = cfg.block_configs()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let backbone = Backbone::from_blocks(cfg, &blocks, &mut rng);
        rng.set_stream(1);
        let bmnet = BmNet::init(cfg, &blocks, &mut rng);
        rng.set_stream(2);
        let sgnet = SgNet::init(cfg, &mut rng);
        Ok(Self {
            backbone,
            bmnet,
            sgnet: Some(sgnet),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            backbone: self.backbone.zeros_like(),
            bmnet: self.bmnet.zeros_like(),
            sgnet: self.sgnet.as_ref().map(SgNet::zeros_like),
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.backbone.num_blocks()
    }

    /// Eval-mode mask bits for one sample (no noise).
    pub fn eval_bits(&self, x: &Feature, mode: MaskMode) -> Result<Vec<u8>> {
        match mode {
            MaskMode::AllKeep => Ok(vec![1; self.num_blocks()]),
            MaskMode::Adaptive => {
                let (z1, _) = self.backbone.stem_forward(x)?;
                self.bmnet.eval_bits(&z1)
            }
        }
    }

    /// Inference for one sample: logits and the mask that was applied.
    /// The SGNet is never consulted.
    pub fn infer(&self, x: &Feature, mode: MaskMode) -> Result<(Vec<f32>, Vec<u8>)> {
        let (z1, _) = self.backbone.stem_forward(x)?;
        let bits = match mode {
            MaskMode::AllKeep => vec![1; self.num_blocks()],
            MaskMode::Adaptive => self.bmnet.eval_bits(&z1)?,
        };
        let (logits, _) = self.backbone.forward_from_stem(z1, &bits, PassMode::Inference)?;
        Ok((logits, bits))
    }
}

impl Parameters for SgadModel {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = self.backbone.tensors();
        out.extend(self.bmnet.tensors());
        if let Some(s) = &self.sgnet {
            out.extend(s.tensors());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = self.backbone.tensors_mut();
        out.extend(self.bmnet.tensors_mut());
        if let Some(s) = &mut self.sgnet {
            out.extend(s.tensors_mut());
        }
        out
    }
}
