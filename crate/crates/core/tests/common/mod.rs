//! Shared fixtures and measurement routines for the integration tests and
//! the acceptance harness.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sgad::backbone::{Backbone, PassMode, ResidualBlock};
use sgad::bmnet::{ste_backward, MaskBatch, NoiseSchedule};
use sgad::data::Dataset;
use sgad::loss::{cross_entropy_sample, LossConfig};
use sgad::model::{MaskMode, SgadModel};
use sgad::network::NetworkConfig;
use sgad::nn::{softmax, Feature, Parameters};
use sgad::sgnet::{MappingConfig, MappingMode};
use sgad::trainer::{train_step, TrainConfig, TrainPlan, TrainState};

/// Single C-block, three blocks, 3x8x8 inputs.
pub fn toy_network(num_classes: usize) -> NetworkConfig {
    NetworkConfig {
        in_channels: 3,
        image_size: 8,
        num_classes,
        widths: vec![4],
        blocks_per_stage: 3,
        conv_kernel: 3,
        bmnet_channels: 4,
        bmnet_pool: 2,
        sgnet_widths: vec![4, 4],
        init_seed: 11,
    }
}

pub fn random_dataset(cfg: &NetworkConfig, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = cfg.in_channels * cfg.image_size * cfg.image_size;
    let images = (0..n * len).map(|_| StandardNormal.sample(&mut rng)).collect();
    let labels = (0..n).map(|i| (i * 7 + 3) % cfg.num_classes).collect();
    Dataset {
        channels: cfg.in_channels,
        height: cfg.image_size,
        width: cfg.image_size,
        num_classes: cfg.num_classes,
        images,
        labels,
        hard: Vec::new(),
    }
}

/// `|a - b| / |b|` over flattened vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-30)
}

pub fn block_values(b: &ResidualBlock) -> Vec<f64> {
    let mut out = Vec::new();
    for v in [&b.conv1.weight, &b.conv1.bias, &b.conv2.weight, &b.conv2.bias] {
        out.extend(v.iter().map(|&x| x as f64));
    }
    if let Some(p) = &b.projection {
        out.extend(p.weight.iter().chain(&p.bias).map(|&x| x as f64));
    }
    out
}

/// Per-sample classification-loss gradient of the backbone for fixed bits.
pub fn sample_gradient(bb: &Backbone, x: &Feature, label: usize, bits: &[u8], mode: PassMode) -> (Backbone, Vec<f32>) {
    let (z1, stem) = bb.stem_forward(x).unwrap();
    let (logits, trace) = bb.forward_from_stem(z1, bits, mode).unwrap();
    let (_, dlogits) = cross_entropy_sample(&logits, label).unwrap();
    let mut grads = bb.zeros_like();
    let mut dmask = vec![0.0; bits.len()];
    let dz1 = bb.backward_to_stem(&trace, &dlogits, &mut grads, &mut dmask);
    bb.stem_backward(&stem, dz1, &mut grads);
    (grads, dmask)
}

/// Counts (sample, block) pairs whose mask bit is 0 but whose block
/// parameter gradient has a nonzero entry, over every mask of the toy net.
pub fn zero_gradient_violations() -> (usize, usize) {
    let cfg = toy_network(3);
    let bb = Backbone::build(&cfg).unwrap();
    let data = random_dataset(&cfg, 6, 1);
    let l = bb.num_blocks();
    let (mut checked, mut violations) = (0, 0);
    for mode in [PassMode::Train, PassMode::TrainFrozenMask] {
        for code in 0..(1u32 << l) {
            let bits: Vec<u8> = (0..l).map(|j| ((code >> j) & 1) as u8).collect();
            for n in 0..data.len() {
                let (g, _) = sample_gradient(&bb, &data.image(n), data.labels[n], &bits, mode);
                for i in 0..l {
                    if bits[i] == 0 {
                        checked += 1;
                        if block_values(&g.blocks[i]).iter().any(|&v| v != 0.0) {
                            violations += 1;
                        }
                    }
                }
            }
        }
    }
    (checked, violations)
}

/// Batch gradient of block 0 when blocks 1.. are dropped for every sample,
/// against `(1/N) sum_n m_n (dR_n/dz^L_n) grad f^0_n` evaluated by hand.
pub fn downstream_dropped_error() -> f64 {
    let cfg = toy_network(4);
    let bb = Backbone::build(&cfg).unwrap();
    let data = random_dataset(&cfg, 8, 2);
    let n = data.len();
    let keep0 = [1u8, 0, 1, 1, 0, 1, 0, 1];
    let block = &bb.blocks[0];

    let mut implemented = block.zeros_like();
    let mut oracle = block.zeros_like();
    for s in 0..n {
        let bits = [keep0[s], 0, 0];
        let (g, _) = sample_gradient(&bb, &data.image(s), data.labels[s], &bits, PassMode::TrainFrozenMask);
        accumulate(&mut implemented, &g.blocks[0]);

        if keep0[s] == 0 {
            continue;
        }
        let (z1, _) = bb.stem_forward(&data.image(s)).unwrap();
        let (hidden_pre, c1) = block.conv1.forward(&z1).unwrap();
        let (f, c2) = block.conv2.forward(&hidden_pre.relu()).unwrap();
        let mut zl = z1.clone();
        zl.add_assign(&f);
        let pooled = zl.relu().global_avg_pool();
        let p = softmax(&bb.head.forward(&pooled));
        let plane = zl.plane() as f32;
        let mut dpooled = vec![0.0f32; pooled.len()];
        for (k, pk) in p.iter().enumerate() {
            let d = pk - if k == data.labels[s] { 1.0 } else { 0.0 };
            for (c, dp) in dpooled.iter_mut().enumerate() {
                *dp += bb.head.weight[k * pooled.len() + c] * d;
            }
        }
        let mut g_l = zl.clone();
        for (c, chunk) in g_l.data.chunks_exact_mut(zl.plane()).enumerate() {
            for v in chunk.iter_mut() {
                *v = if *v > 0.0 { dpooled[c] / plane } else { 0.0 };
            }
        }
        let mut one = block.zeros_like();
        let mut dh = block.conv2.backward(&c2, &g_l, &mut one.conv2, true).unwrap();
        Feature::relu_backward_inplace(&mut dh, &hidden_pre);
        block.conv1.backward(&c1, &dh, &mut one.conv1, false);
        accumulate(&mut oracle, &one);
    }
    let scale = 1.0 / n as f64;
    let a: Vec<f64> = block_values(&implemented).iter().map(|v| v * scale).collect();
    let b: Vec<f64> = block_values(&oracle).iter().map(|v| v * scale).collect();
    rel_err(&a, &b)
}

fn accumulate(acc: &mut ResidualBlock, g: &ResidualBlock) {
    for (a, b) in [
        (&mut acc.conv1.weight, &g.conv1.weight),
        (&mut acc.conv1.bias, &g.conv1.bias),
        (&mut acc.conv2.weight, &g.conv2.weight),
        (&mut acc.conv2.bias, &g.conv2.bias),
    ] {
        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    }
}

/// Worst relative error of the STE backward against central differences of
/// the sigmoid, over logits in [-8, 8].
pub fn ste_error() -> f64 {
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let h = 1e-5;
    (-800..=800)
        .map(|k| {
            let x = k as f64 / 100.0;
            let fd = (sig(x + h) - sig(x - h)) / (2.0 * h);
            let got = ste_backward(1.0, x as f32) as f64;
            (got - fd).abs() / fd.abs()
        })
        .fold(0.0, f64::max)
}

pub fn plan(cfg: &NetworkConfig, train: TrainConfig, loss: LossConfig) -> TrainPlan {
    TrainPlan {
        noise: NoiseSchedule::for_epochs(train.epochs),
        mapping: MappingConfig::new(0.5, cfg.num_blocks(), cfg.num_classes, MappingMode::Consistent).unwrap(),
        mask_mode: MaskMode::Adaptive,
        train,
        loss,
    }
}

pub fn plain_sgd(lr: f64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        decay_epochs: vec![],
        base_lr: lr,
        momentum: 0.0,
        ..TrainConfig::default()
    }
}

/// Frozen-mask single-step update of block 0 versus
/// `lr * rats_b * mean kept-sample gradient`, momentum off. Blocks
/// downstream of block 0 are dropped for the whole batch.
pub fn effective_lr_error() -> (f64, f64) {
    let cfg = toy_network(3);
    let model = SgadModel::build(&cfg).unwrap();
    let data = random_dataset(&cfg, 8, 3);
    let lr = 0.05;
    let p = plan(&cfg, plain_sgd(lr), LossConfig::default());
    let keep0 = [1u8, 0, 1, 1, 0, 1, 1, 0];
    let bits: Vec<u8> = keep0.iter().flat_map(|&k| [k, 0, 0]).collect();
    let mask = MaskBatch::from_bits(8, 3, bits).unwrap();
    let idx: Vec<usize> = (0..8).collect();

    let mut batch = TrainState::new(model.clone());
    train_step(&mut batch, &p, &data, &idx, Some(&mask)).unwrap();
    let before = block_values(&model.backbone.blocks[0]);
    let realized: Vec<f64> = before
        .iter()
        .zip(block_values(&batch.model.backbone.blocks[0]))
        .map(|(a, b)| a - b)
        .collect();

    let kept: Vec<usize> = (0..8).filter(|&s| keep0[s] == 1).collect();
    let mut mean = vec![0.0f64; before.len()];
    for &s in &kept {
        let mut single = TrainState::new(model.clone());
        let row = MaskBatch::from_bits(1, 3, vec![1, 0, 0]).unwrap();
        train_step(&mut single, &p, &data, &[s], Some(&row)).unwrap();
        for ((m, a), b) in mean.iter_mut().zip(&before).zip(block_values(&single.model.backbone.blocks[0])) {
            *m += (a - b) / lr / kept.len() as f64;
        }
    }
    let rats_b = mask.keep_ratio(0) as f64;
    let predicted: Vec<f64> = mean.iter().map(|g| lr * rats_b * g).collect();
    (rel_err(&realized, &predicted), rats_b)
}

pub fn tensor_values(model: &SgadModel) -> Vec<Vec<f32>> {
    model.tensors().iter().map(|t| t.data.to_vec()).collect()
}
