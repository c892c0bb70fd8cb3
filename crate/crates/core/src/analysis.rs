//! FLOPs accounting, keep-ratio statistics, dead-block pruning and
//! guideline-free export.
//!
//! FLOPs are multiply-accumulates of convolution and fully-connected layers;
//! activations, pooling and additions are not counted.

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::bmnet::{BmNet, MaskBatch};
use crate::data::Dataset;
use crate::error::{Result, SgadError};
use crate::model::{MaskMode, SgadModel};
use crate::network::BlockConfig;

pub fn conv_macs(in_channels: usize, out_channels: usize, kernel: usize, out_h: usize, out_w: usize) -> u64 {
    (out_h * out_w * out_channels * in_channels * kernel * kernel) as u64
}

pub fn linear_macs(in_features: usize, out_features: usize) -> u64 {
    (in_features * out_features) as u64
}

/// MACs of one residual block for an input of `in_h x in_w`: both branch
/// convolutions plus the 1x1 projection when the block changes shape.
pub fn count_block_macs(block: &BlockConfig, in_h: usize, in_w: usize) -> u64 {
    let k = block.conv_kernel;
    let pad = k / 2;
    let s = block.spatial_stride;
    let oh = (in_h + 2 * pad - k) / s + 1;
    let ow = (in_w + 2 * pad - k) / s + 1;
    let mut macs = conv_macs(block.in_channels, block.out_channels, k, oh, ow)
        + conv_macs(block.out_channels, block.out_channels, k, oh, ow);
    if block.changes_shape() {
        let ph = (in_h - 1) / s + 1;
        let pw = (in_w - 1) / s + 1;
        macs += conv_macs(block.in_channels, block.out_channels, 1, ph, pw);
    }
    macs
}

/// Static MAC table of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacTable {
    pub stem: u64,
    pub blocks: Vec<u64>,
    pub head: u64,
    pub bmnet: u64,
    pub forced: Vec<bool>,
}

impl MacTable {
    pub fn for_model(backbone: &Backbone, bmnet: &BmNet) -> Self {
        let s = backbone.image_size;
        let stem = backbone.stem.macs(s, s);
        let (mut h, mut w) = backbone.stem.output_dims(s, s);
        let mut blocks = Vec::with_capacity(backbone.num_blocks());
        for b in &backbone.blocks {
            blocks.push(count_block_macs(&b.config, h, w));
            h = (h - 1) / b.config.spatial_stride + 1;
            w = (w - 1) / b.config.spatial_stride + 1;
        }
        let (zh, zw) = backbone.stem.output_dims(s, s);
        Self {
            stem,
            blocks,
            head: backbone.head.macs(),
            bmnet: bmnet.macs(zh, zw),
            forced: backbone.forced(),
        }
    }

    /// MACs of the unmasked backbone (no BMNet).
    pub fn baseline(&self) -> u64 {
        self.stem + self.blocks.iter().sum::<u64>() + self.head
    }

    /// Stem, head and forced blocks: cost paid by every sample.
    pub fn static_macs(&self) -> u64 {
        self.stem
            + self.head
            + self
                .blocks
                .iter()
                .zip(&self.forced)
                .filter(|(_, &f)| f)
                .map(|(m, _)| m)
                .sum::<u64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub per_block_macs: Vec<u64>,
    pub bmnet_macs: u64,
    pub static_macs: u64,
    pub baseline_macs: u64,
    pub per_block_keep_ratio: Vec<f64>,
    pub include_bmnet: bool,
    pub n_flops: f64,
    pub dead_blocks: Vec<usize>,
}

/// `(static + sum_i keep_i * macs_i [+ bmnet]) / baseline`, droppable blocks only in the sum.
pub fn normalized_flops(table: &MacTable, keep: &[f64], include_bmnet: bool) -> Result<f64> {
    if keep.len() != table.blocks.len() {
        return Err(SgadError::Structural(format!(
            "{} keep ratios for {} blocks",
            keep.len(),
            table.blocks.len()
        )));
    }
    if keep.iter().any(|k| !(0.0..=1.0).contains(k)) {
        return Err(SgadError::Domain(format!("keep ratios must lie in [0, 1]: {keep:?}")));
    }
    let dynamic: f64 = table
        .blocks
        .iter()
        .zip(&table.forced)
        .zip(keep)
        .filter(|((_, &f), _)| !f)
        .map(|((&m, _), &k)| k * m as f64)
        .sum();
    let bm = if include_bmnet { table.bmnet as f64 } else { 0.0 };
    Ok((table.static_macs() as f64 + dynamic + bm) / table.baseline() as f64)
}

impl FlopsReport {
    pub fn new(table: &MacTable, keep: Vec<f64>, include_bmnet: bool) -> Result<Self> {
        let n_flops = normalized_flops(table, &keep, include_bmnet)?;
        let dead_blocks = keep
            .iter()
            .enumerate()
            .filter(|(_, &k)| k == 0.0)
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            per_block_macs: table.blocks.clone(),
            bmnet_macs: table.bmnet,
            static_macs: table.static_macs(),
            baseline_macs: table.baseline(),
            per_block_keep_ratio: keep,
            include_bmnet,
            n_flops,
            dead_blocks,
        })
    }
}

/// Fraction of samples in `masks` that execute block `i`.
pub fn batch_keep_ratio(masks: &MaskBatch, i: usize) -> Result<f64> {
    if masks.num_samples == 0 {
        return Err(SgadError::Domain("keep ratio of an empty mask batch".into()));
    }
    if i >= masks.num_blocks {
        return Err(SgadError::Domain(format!("block {i} out of range for {} blocks", masks.num_blocks)));
    }
    let kept = (0..masks.num_samples).filter(|&n| masks.row(n)[i] == 1).count();
    Ok(kept as f64 / masks.num_samples as f64)
}

/// Eval-mode masks for every sample of `data`.
pub fn dataset_masks(model: &SgadModel, mode: MaskMode, data: &Dataset) -> Result<MaskBatch> {
    let l = model.num_blocks();
    let mut bits = Vec::with_capacity(data.len() * l);
    for i in 0..data.len() {
        bits.extend(model.eval_bits(&data.image(i), mode)?);
    }
    MaskBatch::from_bits(data.len(), l, bits)
}

/// Blocks that no sample of `data` executes in eval mode.
pub fn detect_dead_blocks(model: &SgadModel, mode: MaskMode, data: &Dataset) -> Result<Vec<usize>> {
    let masks = dataset_masks(model, mode, data)?;
    let mut dead = Vec::new();
    for i in 0..masks.num_blocks {
        if batch_keep_ratio(&masks, i)? == 0.0 {
            dead.push(i);
        }
    }
    Ok(dead)
}

/// Removes the listed block positions after re-verifying on `reference`
/// that no sample executes them. The BMNet head loses the matching rows.
pub fn prune_dead_blocks(model: &SgadModel, dead: &[usize], reference: &Dataset) -> Result<SgadModel> {
    if dead.is_empty() {
        return Ok(model.clone());
    }
    let l = model.num_blocks();
    let forced = model.backbone.forced();
    for &i in dead {
        if i >= l {
            return Err(SgadError::Domain(format!("block {i} out of range for {l} blocks")));
        }
        if forced[i] {
            return Err(SgadError::LiveBlock { block: i, sample: 0 });
        }
    }
    for n in 0..reference.len() {
        let bits = model.eval_bits(&reference.image(n), MaskMode::Adaptive)?;
        if let Some(&i) = dead.iter().find(|&&i| bits[i] == 1) {
            return Err(SgadError::LiveBlock { block: i, sample: n });
        }
    }
    Ok(SgadModel {
        backbone: model.backbone.without_blocks(dead),
        bmnet: model.bmnet.without_outputs(dead),
        sgnet: model.sgnet.clone(),
    })
}

/// Inference artifact: backbone and BMNet only.
pub fn export_inference_model(model: &SgadModel) -> SgadModel {
    SgadModel {
        backbone: model.backbone.clone(),
        bmnet: model.bmnet.clone(),
        sgnet: None,
    }
}

/// Ranks with ties sharing their average rank (1-based).
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks). `None` when either
/// side is constant or the lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {

    #[test]
    fn spearman_reference_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[0.0, 1.0]), None);
        // ranks (1, 2.5, 2.5, 4) vs (1, 2, 3, 4): cov 4.5 / sqrt(4.5 * 5)
        let rho = spearman(&[0.1, 0.5, 0.5, 0.9], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((rho - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-12);
    }

    use super::*;
    use crate::network::NetworkConfig;
    use proptest::prelude::*;

    /// Counts multiplications by visiting every output element and every
    /// kernel tap that lands inside the padded input.
    fn enumerate_conv(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, h: usize) -> u64 {
        let out = (h + 2 * pad - k) / stride + 1;
        let mut count = 0u64;
        for _o in 0..out_c {
            for _y in 0..out {
                for _x in 0..out {
                    for _c in 0..in_c {
                        for _ky in 0..k {
                            for _kx in 0..k {
                                count += 1;
                            }
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn reference_layer_counts() {
        assert_eq!(conv_macs(16, 16, 3, 32, 32), 2_359_296);
        assert_eq!(enumerate_conv(16, 16, 3, 1, 1, 32), 2_359_296);
        assert_eq!(linear_macs(64, 10), 640);
        assert_eq!(conv_macs(16, 32, 1, 16, 16), 131_072);
        assert_eq!(enumerate_conv(16, 32, 1, 2, 0, 32), 131_072);
    }

    #[test]
    fn block_counts_match_enumeration() {
        let plain = BlockConfig {
            index: 0,
            in_channels: 8,
            out_channels: 8,
            spatial_stride: 1,
            conv_kernel: 3,
        };
        assert_eq!(
            count_block_macs(&plain, 16, 16),
            2 * enumerate_conv(8, 8, 3, 1, 1, 16)
        );
        let down = BlockConfig {
            index: 3,
            in_channels: 8,
            out_channels: 16,
            spatial_stride: 2,
            conv_kernel: 3,
        };
        assert_eq!(
            count_block_macs(&down, 16, 16),
            enumerate_conv(8, 16, 3, 2, 1, 16) + enumerate_conv(16, 16, 3, 1, 1, 8) + enumerate_conv(8, 16, 1, 2, 0, 16)
        );
    }

    fn table() -> MacTable {
        let cfg = NetworkConfig::resnet(32).unwrap();
        let m = SgadModel::build(&cfg).unwrap();
        MacTable::for_model(&m.backbone, &m.bmnet)
    }

    #[test]
    fn unmasked_is_one_and_bmnet_is_cheap() {
        let t = table();
        let ones = vec![1.0; 15];
        assert_eq!(normalized_flops(&t, &ones, false).unwrap(), 1.0);
        let with = normalized_flops(&t, &ones, true).unwrap();
        assert!(with > 1.0 && with <= 1.001, "{with}");
        assert!((t.bmnet as f64) / (t.baseline() as f64) <= 0.001);
    }

    #[test]
    fn all_droppable_off_leaves_static_fraction() {
        let t = table();
        let keep: Vec<f64> = t.forced.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
        let n = normalized_flops(&t, &keep, false).unwrap();
        assert_eq!(n, t.static_macs() as f64 / t.baseline() as f64);
        // stem + head + blocks 5, 10 (projections) and 14 (last).
        let expected = t.stem + t.head + t.blocks[5] + t.blocks[10] + t.blocks[14];
        assert_eq!(t.static_macs(), expected);
    }

    #[test]
    fn keep_ratio_counting() {
        let m = MaskBatch::from_bits(10, 2, (0..10).flat_map(|n| [u8::from(n < 3), 1]).collect()).unwrap();
        assert_eq!(batch_keep_ratio(&m, 0).unwrap(), 0.3);
        assert_eq!(batch_keep_ratio(&m, 1).unwrap(), 1.0);
        let empty = MaskBatch::from_bits(0, 2, vec![]).unwrap();
        assert!(matches!(batch_keep_ratio(&empty, 0), Err(SgadError::Domain(_))));
    }

    proptest! {
        #[test]
        fn raising_a_keep_ratio_never_lowers_flops(
            keep in proptest::collection::vec(0.0f64..=1.0, 15),
            idx in 0usize..15,
            bump in 0.0f64..=1.0,
        ) {
            let t = table();
            let before = normalized_flops(&t, &keep, true).unwrap();
            let mut raised = keep.clone();
            raised[idx] = (raised[idx] + bump).min(1.0);
            prop_assert!(normalized_flops(&t, &raised, true).unwrap() >= before);
        }
    }
}
