//! End-to-end training: SGD with momentum on the combined objective, with
//! per-block gradient-magnitude logging and evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{FlopsReport, MacTable};
use crate::backbone::PassMode;
use crate::bmnet::{binarize, sample_noise, ste_backward, MaskBatch, Mode, NoiseSchedule};
use crate::data::Dataset;
use crate::error::{Result, SgadError};
use crate::loss::{cross_entropy_sample, drop_ratio_term, total_loss, LossConfig};
use crate::model::{MaskMode, SgadModel};
use crate::nn::{sigmoid, softmax, Feature, Parameters};
use crate::sgnet::{row_variance, MappingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// `None` scales the default start (epoch 160 of 220) to `epochs`.
    pub grad_log_start_epoch: Option<usize>,
    /// Random 2-pixel-padded crops and horizontal flips.
    pub augment: bool,
    /// Rescales the full gradient to at most this L2 norm; `None` disables.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 220,
            batch_size: 128,
            base_lr: 0.1,
            decay_epochs: vec![128, 160, 192],
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            grad_log_start_epoch: None,
            augment: false,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(SgadError::Config("epochs and batch_size must be positive".into()));
        }
        if self.decay_epochs.windows(2).any(|w| w[1] <= w[0]) || self.decay_epochs.iter().any(|&e| e >= self.epochs) {
            return Err(SgadError::Config(format!(
                "decay epochs {:?} must be strictly increasing and below {}",
                self.decay_epochs, self.epochs
            )));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(SgadError::Config("grad_clip must be positive".into()));
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(SgadError::Config("need base_lr > 0, momentum in [0, 1), weight_decay >= 0".into()));
        }
        Ok(())
    }

    pub fn grad_log_start(&self) -> usize {
        self.grad_log_start_epoch
            .unwrap_or_else(|| ((self.epochs as f64) * 160.0 / 220.0).round() as usize)
    }
}

/// `base_lr * decay_factor^(number of decay epochs reached)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg.decay_epochs.iter().filter(|&&d| epoch >= d).count();
    cfg.base_lr * cfg.decay_factor.powi(passed as i32)
}

/// Everything a training step needs besides data and state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub mapping: MappingConfig,
    pub noise: NoiseSchedule,
    pub mask_mode: MaskMode,
}

/// Running per-block mean of the gradient L1 magnitude.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GradLog {
    pub sums: Vec<f64>,
    pub count: u64,
}

impl GradLog {
    pub fn record(&mut self, per_block: &[f64]) {
        if self.sums.len() != per_block.len() {
            self.sums = vec![0.0; per_block.len()];
            self.count = 0;
        }
        for (s, v) in self.sums.iter_mut().zip(per_block) {
            *s += v;
        }
        self.count += 1;
    }

    pub fn means(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.sums.len()];
        }
        self.sums.iter().map(|s| s / self.count as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub model: SgadModel,
    pub velocity: SgadModel,
    pub grad_log: GradLog,
}

impl TrainState {
    pub fn new(model: SgadModel) -> Self {
        Self {
            epoch: 0,
            step: 0,
            velocity: model.zeros_like(),
            model,
            grad_log: GradLog::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub r_prime: f64,
    pub r_m: f64,
    pub r_g: f64,
    pub total: f64,
    pub rats_b: Vec<f64>,
    pub batch_accuracy: f64,
    pub mean_drop_ratio: f64,
    pub unsaturated_fraction: f64,
    pub grad_l1: Option<Vec<f64>>,
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_736b_6e6f_6973);
    rng.set_stream(step);
    rng
}

/// Per-epoch sample order: a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn augment(x: &Feature, rng: &mut ChaCha8Rng) -> Feature {
    let (dy, dx) = (rng.gen_range(-2i64..=2), rng.gen_range(-2i64..=2));
    let flip = rng.gen::<bool>();
    let mut out = Feature::zeros(x.channels, x.height, x.width);
    let (h, w) = (x.height as i64, x.width as i64);
    for c in 0..x.channels {
        for y in 0..h {
            for xx in 0..w {
                let sy = y + dy;
                let sx0 = if flip { w - 1 - xx } else { xx };
                let sx = sx0 + dx;
                if sy >= 0 && sy < h && sx >= 0 && sx < w {
                    out.data[((c as i64 * h + y) * w + xx) as usize] = x.data[((c as i64 * h + sy) * w + sx) as usize];
                }
            }
        }
    }
    out
}

/// One SGD-with-momentum update on the batch `indices` of `data`.
///
/// `frozen_mask` replaces the BMNet decisions with fixed bits (one row per
/// batch sample); the BMNet then receives no gradient.
pub fn train_step(
    state: &mut TrainState,
    plan: &TrainPlan,
    data: &Dataset,
    indices: &[usize],
    frozen_mask: Option<&MaskBatch>,
) -> Result<StepMetrics> {
    let n = indices.len();
    if n == 0 {
        return Err(SgadError::Domain("empty batch".into()));
    }
    let l = state.model.num_blocks();
    if let Some(m) = frozen_mask {
        if m.num_samples != n || m.num_blocks != l {
            return Err(SgadError::Structural(format!(
                "frozen mask is {}x{}, batch needs {n}x{l}",
                m.num_samples, m.num_blocks
            )));
        }
    }
    let epoch = state.epoch;
    let lr = lr_schedule(epoch, &plan.train);
    let adaptive = plan.mask_mode == MaskMode::Adaptive && frozen_mask.is_none();
    let use_sgnet = plan.mask_mode == MaskMode::Adaptive && state.model.sgnet.is_some();
    let loss = &plan.loss;
    let inv_n = 1.0 / n as f64;
    let forced = state.model.bmnet.forced.clone();
    let cap = (plan.mapping.num_classes as f64 - 1.0) / (plan.mapping.num_classes as f64).powi(2);

    let mut rng = step_rng(plan.train.seed, state.step);
    let model = &state.model;
    let mut grads = model.zeros_like();
    let (mut r_prime, mut r_m, mut r_g) = (0.0f64, 0.0f64, 0.0f64);
    let mut all_bits = Vec::with_capacity(n * l);
    let mut sig_out = Vec::with_capacity(n * l);
    let mut correct = 0usize;

    for (k, &idx) in indices.iter().enumerate() {
        let raw = data.image(idx);
        let x = if plan.train.augment { augment(&raw, &mut rng) } else { raw };
        let y = data.labels[idx];
        let (z1, stem_cache) = model.backbone.stem_forward(&x)?;

        let mut bm = None;
        let bits: Vec<u8> = if let Some(m) = frozen_mask {
            m.row(k).to_vec()
        } else if adaptive {
            let (logits, cache) = model.bmnet.logits_sample(&z1)?;
            let noise = sample_noise(&plan.noise, epoch, Mode::Train, l, &mut rng);
            let noisy: Vec<f32> = logits.iter().zip(&noise).map(|(a, b)| a + b).collect();
            let bits = noisy
                .iter()
                .zip(&forced)
                .map(|(&a, &f)| {
                    let s = sigmoid(a);
                    sig_out.push(s);
                    if f {
                        1
                    } else {
                        binarize(s)
                    }
                })
                .collect();
            bm = Some((cache, noisy));
            bits
        } else {
            vec![1; l]
        };

        let mut expected_drop = 0.0;
        let mut sg = None;
        if use_sgnet {
            let sgnet = model.sgnet.as_ref().expect("checked above");
            let (sg_logits, sg_cache) = sgnet.logits_sample(&x)?;
            let probs = softmax(&sg_logits);
            expected_drop = plan.mapping.map(row_variance(&probs).min(cap))?;
            let (ce_g, mut dsg) = cross_entropy_sample(&sg_logits, y)?;
            r_g += ce_g * inv_n;
            let scale = (loss.alpha_g * inv_n) as f32;
            dsg.iter_mut().for_each(|g| *g *= scale);
            sg = Some((sg_cache, dsg));
        }

        let mode = if adaptive { PassMode::Train } else { PassMode::TrainFrozenMask };
        let (logits, trace) = model.backbone.forward_from_stem(z1, &bits, mode)?;
        let (ce, mut dlogits) = cross_entropy_sample(&logits, y)?;
        r_prime += ce * inv_n;
        let pred = logits
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
            .0;
        correct += usize::from(pred == y);
        let scale = (loss.alpha * inv_n) as f32;
        dlogits.iter_mut().for_each(|g| *g *= scale);

        let mut drm_dbit = 0.0;
        if use_sgnet {
            let (term, d) = drop_ratio_term(expected_drop, &bits);
            r_m += term * inv_n;
            drm_dbit = d;
        }

        let mut dmask = vec![0.0f32; l];
        let mut dz1 = model
            .backbone
            .backward_to_stem(&trace, &dlogits, &mut grads.backbone, &mut dmask);
        if let Some((cache, noisy)) = bm {
            let reg = (loss.alpha_m * inv_n * drm_dbit) as f32;
            let dlogit: Vec<f32> = (0..l)
                .map(|j| if forced[j] { 0.0 } else { ste_backward(dmask[j] + reg, noisy[j]) })
                .collect();
            let dz1_mask = model.bmnet.backward_sample(&cache, &dlogit, &mut grads.bmnet);
            dz1.add_assign(&dz1_mask);
        }
        model.backbone.stem_backward(&stem_cache, dz1, &mut grads.backbone);
        if let (Some((cache, dsg)), Some(sgnet), Some(gs)) = (sg, model.sgnet.as_ref(), grads.sgnet.as_mut()) {
            if loss.alpha_g > 0.0 {
                sgnet.backward_sample(&cache, &dsg, gs);
            }
        }
        all_bits.extend_from_slice(&bits);
    }

    let total = total_loss(r_prime, r_m, r_g, loss);
    let masks = MaskBatch::from_bits(n, l, all_bits)?;
    let total = total.map_err(|e| {
        SgadError::Numeric(format!(
            "{e} at epoch {epoch}, step {}, batch sample indices {:?}; keep ratios {:?}",
            state.step,
            indices,
            masks.keep_ratios()
        ))
    })?;

    let grad_l1 = if epoch >= plan.train.grad_log_start() {
        let sums = grads.backbone.block_l1();
        let per_block: Vec<f64> = sums
            .iter()
            .enumerate()
            .map(|(i, s)| s / grads.backbone.block_parameters(i) as f64)
            .collect();
        state.grad_log.record(&per_block);
        Some(per_block)
    } else {
        None
    };

    apply_sgd(state, &mut grads, plan, lr);
    state.step += 1;

    let measured_drop: f64 = 1.0 - masks.bits.iter().map(|&b| b as f64).sum::<f64>() / (n * l) as f64;
    let unsaturated = if sig_out.is_empty() {
        0.0
    } else {
        sig_out.iter().filter(|&&s| (0.05..=0.95).contains(&s)).count() as f64 / sig_out.len() as f64
    };
    Ok(StepMetrics {
        epoch,
        step: state.step,
        lr,
        r_prime,
        r_m,
        r_g,
        total,
        rats_b: masks.keep_ratios().into_iter().map(f64::from).collect(),
        batch_accuracy: correct as f64 / n as f64,
        mean_drop_ratio: measured_drop,
        unsaturated_fraction: unsaturated,
        grad_l1,
    })
}

/// `v = momentum * v + c * g + wd * theta; theta -= lr * v`, where `c`
/// clips the global gradient norm when configured.
fn apply_sgd(state: &mut TrainState, grads: &mut SgadModel, plan: &TrainPlan, lr: f64) {
    let mu = plan.train.momentum as f32;
    let wd = plan.train.weight_decay as f32;
    let lr = lr as f32;
    let gs = grads.tensors_mut();
    let clip = match plan.train.grad_clip {
        Some(max) => {
            let norm = gs.iter().flat_map(|g| g.iter()).map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if norm > max {
                (max / norm) as f32
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let params = state.model.tensors_mut();
    let vel = state.velocity.tensors_mut();
    for ((p, v), g) in params.into_iter().zip(vel).zip(gs) {
        for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
            let step = clip * gi + wd * *pi;
            *vi = mu * *vi + step;
            *pi -= lr * *vi;
        }
    }
}

/// Mean per-block gradient L1 magnitudes logged so far.
pub fn log_gradient_magnitudes(state: &TrainState) -> Vec<f64> {
    state.grad_log.means()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub executed_blocks: Vec<usize>,
    pub flops: FlopsReport,
}

/// Eval-mode pass over `data` (no noise, no SGNet).
pub fn evaluate(model: &SgadModel, mode: MaskMode, data: &Dataset, include_bmnet: bool) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(SgadError::Domain("cannot evaluate on an empty dataset".into()));
    }
    let l = model.num_blocks();
    let mut kept = vec![0usize; l];
    let mut predictions = Vec::with_capacity(data.len());
    let mut executed = Vec::with_capacity(data.len());
    let mut correct = 0usize;
    for i in 0..data.len() {
        let (logits, bits) = model.infer(&data.image(i), mode)?;
        let pred = logits
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
            .0;
        correct += usize::from(pred == data.labels[i]);
        predictions.push(pred);
        executed.push(bits.iter().filter(|&&b| b == 1).count());
        for (k, &b) in kept.iter_mut().zip(&bits) {
            *k += b as usize;
        }
    }
    let keep: Vec<f64> = kept.iter().map(|&k| k as f64 / data.len() as f64).collect();
    let table = MacTable::for_model(&model.backbone, &model.bmnet);
    let flops = FlopsReport::new(&table, keep, include_bmnet && mode == MaskMode::Adaptive)?;
    Ok(EvalReport {
        accuracy: correct as f64 / data.len() as f64,
        predictions,
        executed_blocks: executed,
        flops,
    })
}

/// Per-sample SGNet soft-target variance (training-side diagnostic).
pub fn guideline_variances(model: &SgadModel, data: &Dataset) -> Result<Vec<f64>> {
    let sgnet = model
        .sgnet
        .as_ref()
        .ok_or_else(|| SgadError::Domain("model has no SGNet".into()))?;
    (0..data.len())
        .map(|i| Ok(row_variance(&softmax(&sgnet.logits_sample(&data.image(i))?.0))))
        .collect()
}

/// SGNet accuracy on `data`.
pub fn guideline_accuracy(model: &SgadModel, data: &Dataset) -> Result<f64> {
    let sgnet = model
        .sgnet
        .as_ref()
        .ok_or_else(|| SgadError::Domain("model has no SGNet".into()))?;
    let mut correct = 0;
    for i in 0..data.len() {
        let (logits, _) = sgnet.logits_sample(&data.image(i))?;
        let pred = logits
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
            .0;
        correct += usize::from(pred == data.labels[i]);
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Summary written at the end of every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub sgnet_accuracy: Option<f64>,
    pub n_flops: f64,
    pub rats_b: Vec<f64>,
    pub mean_executed_blocks: f64,
    /// Running per-block gradient L1 means, once logging has started.
    pub grad_l1_mean: Option<Vec<f64>>,
}

/// Hooks invoked while training.
pub trait TrainObserver {
    fn on_step(&mut self, _metrics: &StepMetrics) -> Result<()> {
        Ok(())
    }
    fn on_epoch(&mut self, _summary: &EpochSummary, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

/// No-op observer.
pub struct Silent;

impl TrainObserver for Silent {}

/// Runs epochs `state.epoch .. plan.train.epochs`.
pub fn train(
    state: &mut TrainState,
    plan: &TrainPlan,
    train_set: &Dataset,
    test_set: &Dataset,
    include_bmnet: bool,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    plan.train.validate()?;
    while state.epoch < plan.train.epochs {
        let epoch = state.epoch;
        let order = epoch_order(plan.train.seed, epoch, train_set.len());
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(plan.train.batch_size) {
            let m = train_step(state, plan, train_set, batch, None)?;
            loss_sum += m.total;
            batches += 1;
            observer.on_step(&m)?;
        }
        let report = evaluate(&state.model, plan.mask_mode, test_set, include_bmnet)?;
        let sgnet_accuracy = if plan.mask_mode == MaskMode::Adaptive && state.model.sgnet.is_some() {
            Some(guideline_accuracy(&state.model, test_set)?)
        } else {
            None
        };
        let summary = EpochSummary {
            epoch,
            step: state.step,
            lr: lr_schedule(epoch, &plan.train),
            train_loss: loss_sum / batches.max(1) as f64,
            test_accuracy: report.accuracy,
            sgnet_accuracy,
            n_flops: report.flops.n_flops,
            rats_b: report.flops.per_block_keep_ratio.clone(),
            mean_executed_blocks: report.executed_blocks.iter().sum::<usize>() as f64 / report.executed_blocks.len() as f64,
            grad_l1_mean: (state.grad_log.count > 0).then(|| state.grad_log.means()),
        };
        state.epoch += 1;
        observer.on_epoch(&summary, state)?;
    }
    Ok(())
}
