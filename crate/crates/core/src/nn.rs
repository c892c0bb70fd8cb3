//! Per-sample layer primitives with hand-written backward passes.
//!
//! Every layer works on a single sample at a time. Batches are handled by the
//! callers, which keeps per-sample masking and per-sample gradients trivial.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SgadError};

/// A single sample's feature map, channel-major (`c`, `h`, `w`).
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Feature {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(SgadError::Structural(format!(
                "feature data has {} elements, expected {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn add_assign(&mut self, other: &Feature) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn relu(&self) -> Feature {
        Feature {
            data: self.data.iter().map(|&v| v.max(0.0)).collect(),
            ..*self
        }
    }

    /// Zeroes `grad` wherever `pre` was not positive.
    pub fn relu_backward_inplace(grad: &mut Feature, pre: &Feature) {
        for (g, &p) in grad.data.iter_mut().zip(&pre.data) {
            if p <= 0.0 {
                *g = 0.0;
            }
        }
    }

    pub fn global_avg_pool(&self) -> Vec<f32> {
        let plane = self.plane();
        let inv = 1.0 / plane as f32;
        self.data
            .chunks_exact(plane)
            .map(|c| c.iter().sum::<f32>() * inv)
            .collect()
    }

    pub fn global_avg_pool_backward(grad: &[f32], channels: usize, height: usize, width: usize) -> Feature {
        let plane = height * width;
        let inv = 1.0 / plane as f32;
        let mut data = Vec::with_capacity(channels * plane);
        for &g in grad.iter().take(channels) {
            data.extend(std::iter::repeat_n(g * inv, plane));
        }
        Feature {
            channels,
            height,
            width,
            data,
        }
    }

    /// Non-overlapping average pooling by an integer factor.
    pub fn avg_pool(&self, factor: usize) -> Feature {
        if factor == 1 {
            return self.clone();
        }
        let (oh, ow) = (self.height / factor, self.width / factor);
        let inv = 1.0 / (factor * factor) as f32;
        let mut out = Feature::zeros(self.channels, oh, ow);
        for c in 0..self.channels {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        let row = (c * self.height + y * factor + dy) * self.width + x * factor;
                        acc += self.data[row..row + factor].iter().sum::<f32>();
                    }
                    out.data[(c * oh + y) * ow + x] = acc * inv;
                }
            }
        }
        out
    }

    pub fn avg_pool_backward(grad: &Feature, factor: usize, height: usize, width: usize) -> Feature {
        if factor == 1 {
            return grad.clone();
        }
        let inv = 1.0 / (factor * factor) as f32;
        let mut out = Feature::zeros(grad.channels, height, width);
        for c in 0..grad.channels {
            for y in 0..height {
                let gy = y / factor;
                for x in 0..width {
                    let gx = x / factor;
                    if gy < grad.height && gx < grad.width {
                        out.data[(c * height + y) * width + x] =
                            grad.data[(c * grad.height + gy) * grad.width + gx] * inv;
                    }
                }
            }
        }
        out
    }

    pub fn dot(&self, other: &Feature) -> f32 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major storage given explicit strides.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds checked above; strides describe dense row- or column-major
    // layouts of exactly those extents.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Square-kernel 2-D convolution with bias and symmetric zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, k, k]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Saved im2col matrix from a forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    pub col: Vec<f32>,
    pub in_height: usize,
    pub in_width: usize,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    /// He-normal weights scaled by `gain`, zero bias.
    pub fn he_init<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f32,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel, stride, padding);
        let fan_in = (in_channels * kernel * kernel) as f32;
        let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("finite std");
        for w in conv.weight.iter_mut() {
            *w = normal.sample(rng);
        }
        conv
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        (
            (height + 2 * self.padding - self.kernel) / self.stride + 1,
            (width + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn macs(&self, height: usize, width: usize) -> u64 {
        let (oh, ow) = self.output_dims(height, width);
        (oh * ow * self.out_channels * self.in_channels * self.kernel * self.kernel) as u64
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_channels, self.out_channels, self.kernel, self.stride, self.padding)
    }

    fn im2col(&self, x: &Feature) -> Vec<f32> {
        let (oh, ow) = self.output_dims(x.height, x.width);
        let k = self.kernel;
        let cols = oh * ow;
        let mut col = vec![0.0f32; self.in_channels * k * k * cols];
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for y in 0..oh {
                        let iy = (y * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src_row = (c * x.height + iy as usize) * x.width;
                        for xx in 0..ow {
                            let ix = (xx * self.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < x.width as isize {
                                dst[y * ow + xx] = x.data[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f32], height: usize, width: usize) -> Feature {
        let (oh, ow) = self.output_dims(height, width);
        let k = self.kernel;
        let cols = oh * ow;
        let mut out = Feature::zeros(self.in_channels, height, width);
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for y in 0..oh {
                        let iy = (y * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        let dst_row = (c * height + iy as usize) * width;
                        for xx in 0..ow {
                            let ix = (xx * self.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < width as isize {
                                out.data[dst_row + ix as usize] += src[y * ow + xx];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Feature) -> Result<(Feature, ConvCache)> {
        if x.channels != self.in_channels {
            return Err(SgadError::Structural(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, x.channels
            )));
        }
        if x.height + 2 * self.padding < self.kernel || x.width + 2 * self.padding < self.kernel {
            return Err(SgadError::Structural(format!(
                "input {}x{} too small for kernel {}",
                x.height, x.width, self.kernel
            )));
        }
        let (oh, ow) = self.output_dims(x.height, x.width);
        let col = self.im2col(x);
        let rows = self.in_channels * self.kernel * self.kernel;
        let cols = oh * ow;
        let mut out = Feature::zeros(self.out_channels, oh, ow);
        for (o, chunk) in out.data.chunks_exact_mut(cols).enumerate() {
            chunk.fill(self.bias[o]);
        }
        sgemm(
            self.out_channels,
            rows,
            cols,
            &self.weight,
            (rows as isize, 1),
            &col,
            (cols as isize, 1),
            1.0,
            &mut out.data,
        );
        Ok((
            out,
            ConvCache {
                col,
                in_height: x.height,
                in_width: x.width,
            },
        ))
    }

    /// Accumulates parameter gradients into `grad` and optionally returns the
    /// gradient with respect to the input.
    pub fn backward(&self, cache: &ConvCache, grad_out: &Feature, grad: &mut Conv2d, need_input: bool) -> Option<Feature> {
        let rows = self.in_channels * self.kernel * self.kernel;
        let cols = grad_out.plane();
        for (o, chunk) in grad_out.data.chunks_exact(cols).enumerate() {
            grad.bias[o] += chunk.iter().sum::<f32>();
        }
        // dW += dOut * col^T
        sgemm(
            self.out_channels,
            cols,
            rows,
            &grad_out.data,
            (cols as isize, 1),
            &cache.col,
            (1, cols as isize),
            1.0,
            &mut grad.weight,
        );
        if !need_input {
            return None;
        }
        // dcol = W^T * dOut
        let mut dcol = vec![0.0f32; rows * cols];
        sgemm(
            rows,
            self.out_channels,
            cols,
            &self.weight,
            (1, rows as isize),
            &grad_out.data,
            (cols as isize, 1),
            0.0,
            &mut dcol,
        );
        Some(self.col2im(&dcol, cache.in_height, cache.in_width))
    }
}

/// Fully-connected layer. Plain loops: every output is an independent dot
/// product, so removing an output row leaves the other outputs bit-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: vec![0.0; in_features * out_features],
            bias: vec![0.0; out_features],
        }
    }

    pub fn init<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let mut fc = Self::zeros(in_features, out_features);
        let normal = Normal::new(0.0, (1.0 / in_features as f32).sqrt()).expect("finite std");
        for w in fc.weight.iter_mut() {
            *w = normal.sample(rng);
        }
        fc
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_features, self.out_features)
    }

    pub fn macs(&self) -> u64 {
        (self.in_features * self.out_features) as u64
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.in_features);
        self.weight
            .chunks_exact(self.in_features)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>() + b)
            .collect()
    }

    pub fn backward(&self, x: &[f32], grad_out: &[f32], grad: &mut Linear) -> Vec<f32> {
        let mut dx = vec![0.0f32; self.in_features];
        for (o, &g) in grad_out.iter().enumerate() {
            grad.bias[o] += g;
            if g == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.in_features..(o + 1) * self.in_features];
            let grow = &mut grad.weight[o * self.in_features..(o + 1) * self.in_features];
            for i in 0..self.in_features {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }

    /// Copy keeping only the listed output rows, in order.
    pub fn select_outputs(&self, keep: &[usize]) -> Linear {
        let mut out = Linear::zeros(self.in_features, keep.len());
        for (dst, &src) in keep.iter().enumerate() {
            out.weight[dst * self.in_features..(dst + 1) * self.in_features]
                .copy_from_slice(&self.weight[src * self.in_features..(src + 1) * self.in_features]);
            out.bias[dst] = self.bias[src];
        }
        out
    }
}

/// A named view of one parameter tensor.
#[derive(Debug)]
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f32],
}

/// Parameter containers expose their tensors in a fixed order so that
/// gradients, momentum buffers and serialized files line up by position.
pub trait Parameters {
    fn tensors(&self) -> Vec<TensorRef<'_>>;
    fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }
}

pub(crate) fn conv_tensors<'a>(prefix: &str, conv: &'a Conv2d, out: &mut Vec<TensorRef<'a>>) {
    out.push(TensorRef {
        name: format!("{prefix}.weight"),
        shape: conv.weight_shape(),
        data: &conv.weight,
    });
    out.push(TensorRef {
        name: format!("{prefix}.bias"),
        shape: vec![conv.out_channels],
        data: &conv.bias,
    });
}

pub(crate) fn linear_tensors<'a>(prefix: &str, fc: &'a Linear, out: &mut Vec<TensorRef<'a>>) {
    out.push(TensorRef {
        name: format!("{prefix}.weight"),
        shape: vec![fc.out_features, fc.in_features],
        data: &fc.weight,
    });
    out.push(TensorRef {
        name: format!("{prefix}.bias"),
        shape: vec![fc.out_features],
        data: &fc.bias,
    });
}

pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
