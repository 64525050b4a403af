//! Small convolutional feature extractor: `blocks` × (conv 3×3, pad 1 → ReLU
//! → 2×2 max-pool). Its last feature map feeds the bilinear fusion layer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::colorspace::ColorSpace;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output channels of each block; the last entry is the feature width.
    pub channels: Vec<usize>,
    /// Square kernel size, odd. Padding is `kernel / 2`.
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Input height and width.
    pub input_size: usize,
}

fn default_kernel() -> usize {
    3
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 16],
            kernel: 3,
            input_size: 32,
        }
    }
}

impl BackboneConfig {
    pub fn blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    /// Spatial side of the final feature map.
    pub fn output_size(&self) -> usize {
        (0..self.blocks()).fold(self.input_size, |s, _| s / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("backbone needs at least one block".into()));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("backbone channels must be positive".into()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "backbone kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.output_size() < 2 {
            return Err(Error::Config(format!(
                "input {} with {} blocks leaves a final grid smaller than 2x2",
                self.input_size,
                self.blocks()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<F> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// Layout `[out][in][ky][kx]`.
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Real> ConvLayer<F> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: vec![F::zero(); out_channels * in_channels * kernel * kernel],
            bias: vec![F::zero(); out_channels],
        }
    }

    #[inline]
    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx
    }

    /// Same-padded convolution.
    pub fn forward(&self, input: &Tensor3<F>) -> Tensor3<F> {
        let (h, w) = (input.height, input.width);
        let pad = (self.kernel / 2) as isize;
        let mut out = Tensor3::zeros(self.out_channels, h, w);
        let plane = h * w;
        for o in 0..self.out_channels {
            let dst = &mut out.data[o * plane..(o + 1) * plane];
            dst.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.in_channels {
                let src = &input.data[i * plane..(i + 1) * plane];
                for ky in 0..self.kernel {
                    let dy = ky as isize - pad;
                    for kx in 0..self.kernel {
                        let dx = kx as isize - pad;
                        let wv = self.weight[self.widx(o, i, ky, kx)];
                        if wv == F::zero() {
                            continue;
                        }
                        let (y0, y1) = valid_range(h, dy);
                        let (x0, x1) = valid_range(w, dx);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let drow = &mut dst[y * w + x0..y * w + x1];
                            let srow = &src[sy * w + (x0 as isize + dx) as usize
                                ..sy * w + (x1 as isize + dx) as usize];
                            for (d, &s) in drow.iter_mut().zip(srow) {
                                *d = *d + wv * s;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients into `grad` and returns the input gradient.
    pub fn backward(&self, input: &Tensor3<F>, d_out: &Tensor3<F>, grad: &mut ConvLayer<F>) -> Tensor3<F> {
        let (h, w) = (input.height, input.width);
        let pad = (self.kernel / 2) as isize;
        let plane = h * w;
        let mut d_in = Tensor3::zeros(self.in_channels, h, w);
        for o in 0..self.out_channels {
            let dsrc = &d_out.data[o * plane..(o + 1) * plane];
            grad.bias[o] = grad.bias[o] + dsrc.iter().copied().sum::<F>();
            for i in 0..self.in_channels {
                let src = &input.data[i * plane..(i + 1) * plane];
                let din = &mut d_in.data[i * plane..(i + 1) * plane];
                for ky in 0..self.kernel {
                    let dy = ky as isize - pad;
                    for kx in 0..self.kernel {
                        let dx = kx as isize - pad;
                        let widx = self.widx(o, i, ky, kx);
                        let wv = self.weight[widx];
                        let (y0, y1) = valid_range(h, dy);
                        let (x0, x1) = valid_range(w, dx);
                        let mut acc = F::zero();
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let s0 = sy * w + (x0 as isize + dx) as usize;
                            let s1 = sy * w + (x1 as isize + dx) as usize;
                            let drow = &dsrc[y * w + x0..y * w + x1];
                            for (&g, &s) in drow.iter().zip(&src[s0..s1]) {
                                acc = acc + g * s;
                            }
                            for (di, &g) in din[s0..s1].iter_mut().zip(drow) {
                                *di = *di + g * wv;
                            }
                        }
                        grad.weight[widx] = grad.weight[widx] + acc;
                    }
                }
            }
        }
        d_in
    }
}

/// Output rows `y` for which `y + offset` lies inside `[0, len)`.
#[inline]
fn valid_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).min(len as isize).max(0) as usize;
    (lo.min(hi), hi)
}

/// 2×2/stride-2 max pool; returns the pooled tensor and, per output cell,
/// the flat input index that won (first in row-major order on ties).
pub fn max_pool<F: Real>(input: &Tensor3<F>) -> (Tensor3<F>, Vec<usize>) {
    let (oh, ow) = (input.height / 2, input.width / 2);
    let mut out = Tensor3::zeros(input.channels, oh, ow);
    let mut arg = vec![0usize; input.channels * oh * ow];
    for c in 0..input.channels {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = input.idx(c, 2 * y, 2 * x);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = input.idx(c, 2 * y + dy, 2 * x + dx);
                    if input.data[i] > input.data[best] {
                        best = i;
                    }
                }
                let o = out.idx(c, y, x);
                out.data[o] = input.data[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights<F> {
    pub layers: Vec<ConvLayer<F>>,
}

impl<F: Real> BackboneWeights<F> {
    pub fn zeros(config: &BackboneConfig) -> Self {
        let mut in_c = 3;
        let layers = config
            .channels
            .iter()
            .map(|&out_c| {
                let l = ConvLayer::zeros(in_c, out_c, config.kernel);
                in_c = out_c;
                l
            })
            .collect();
        Self { layers }
    }

    /// He-normal weights (std = sqrt(2 / fan_in)), zero biases.
    pub fn init<R: Rng>(config: &BackboneConfig, rng: &mut R) -> Self {
        let mut w = Self::zeros(config);
        for layer in &mut w.layers {
            let fan_in = (layer.in_channels * layer.kernel * layer.kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            layer
                .weight
                .iter_mut()
                .for_each(|v| *v = F::of(normal.sample(rng)));
        }
        w
    }

    pub fn forward(&self, input: &Tensor3<F>, space: ColorSpace) -> Result<(FeatureMap<F>, BackboneCache<F>)> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::Config("backbone has no layers".into()))?;
        if input.channels != first.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "backbone expects {} input channels, got {}",
                first.in_channels, input.channels
            )));
        }
        let mut blocks = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            if x.height < 2 || x.width < 2 {
                return Err(Error::ShapeMismatch(format!(
                    "feature map {}x{} too small to pool",
                    x.height, x.width
                )));
            }
            let mut pre = layer.forward(&x);
            let mask: Vec<bool> = pre.data.iter().map(|&v| v > F::zero()).collect();
            for (v, &m) in pre.data.iter_mut().zip(&mask) {
                if !m {
                    *v = F::zero();
                }
            }
            let (pooled, argmax) = max_pool(&pre);
            blocks.push(BlockCache {
                input: std::mem::replace(&mut x, pooled),
                active: mask,
                pre_shape: pre.shape(),
                argmax,
            });
        }
        Ok((FeatureMap { tensor: x, space }, BackboneCache { blocks }))
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient.
    pub fn backward(&self, cache: &BackboneCache<F>, d_out: &Tensor3<F>, grad: &mut BackboneWeights<F>) -> Tensor3<F> {
        let mut d = d_out.clone();
        for ((layer, block), g) in self
            .layers
            .iter()
            .zip(&cache.blocks)
            .zip(grad.layers.iter_mut())
            .rev()
        {
            let [c, h, w] = block.pre_shape;
            let mut d_pre = Tensor3::zeros(c, h, w);
            for (o, &src) in block.argmax.iter().enumerate() {
                d_pre.data[src] = d_pre.data[src] + d.data[o];
            }
            for (v, &m) in d_pre.data.iter_mut().zip(&block.active) {
                if !m {
                    *v = F::zero();
                }
            }
            d = layer.backward(&block.input, &d_pre, g);
        }
        d
    }

    pub fn cast<G: Real>(&self) -> BackboneWeights<G> {
        let cast = |v: &[F]| v.iter().map(|x| G::of(x.as_f64())).collect();
        BackboneWeights {
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    in_channels: l.in_channels,
                    out_channels: l.out_channels,
                    kernel: l.kernel,
                    weight: cast(&l.weight),
                    bias: cast(&l.bias),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct BlockCache<F> {
    input: Tensor3<F>,
    active: Vec<bool>,
    pre_shape: [usize; 3],
    argmax: Vec<usize>,
}

/// Activations retained by [`BackboneWeights::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BackboneCache<F> {
    blocks: Vec<BlockCache<F>>,
}

impl<F> BackboneCache<F> {
    /// Discrete state of every ReLU and pool decision, used to detect when a
    /// finite-difference probe crosses a kink.
    pub fn pattern(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        for b in &self.blocks {
            sig.extend(b.argmax.iter().map(|&a| a as u64));
            let mut word = 0u64;
            for (i, &m) in b.active.iter().enumerate() {
                if m {
                    word ^= (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                }
            }
            sig.push(word);
        }
        sig
    }
}

/// Backbone output for one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<F> {
    pub tensor: Tensor3<F>,
    pub space: ColorSpace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocationPair<F> {
    pub x: Vec<F>,
    pub y: Vec<F>,
}

/// Per-location channel vectors of the two streams, in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationPairSet<F> {
    pub pairs: Vec<LocationPair<F>>,
    pub grid: (usize, usize),
}

impl<F> LocationPairSet<F> {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn pair_locations<F: Real>(fa: &FeatureMap<F>, fb: &FeatureMap<F>) -> Result<LocationPairSet<F>> {
    let (a, b) = (&fa.tensor, &fb.tensor);
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::GridMismatch {
            a: (a.height, a.width),
            b: (b.height, b.width),
        });
    }
    if a.height * a.width == 0 {
        return Err(Error::Empty("feature grid"));
    }
    let column = |t: &Tensor3<F>, y: usize, x: usize| (0..t.channels).map(|c| t.at(c, y, x)).collect();
    let mut pairs = Vec::with_capacity(a.height * a.width);
    for y in 0..a.height {
        for x in 0..a.width {
            pairs.push(LocationPair {
                x: column(a, y, x),
                y: column(b, y, x),
            });
        }
    }
    Ok(LocationPairSet {
        pairs,
        grid: (a.height, a.width),
    })
}

/// Scatters per-location gradients back onto a C×H×W map (inverse of the
/// row-major gather in [`pair_locations`]).
pub fn scatter_locations<F: Real>(grads: &[Vec<F>], channels: usize, grid: (usize, usize)) -> Tensor3<F> {
    let (h, w) = grid;
    let mut t = Tensor3::zeros(channels, h, w);
    for (v, g) in grads.iter().enumerate() {
        let (y, x) = (v / w, v % w);
        for (c, &gc) in g.iter().enumerate() {
            let i = t.idx(c, y, x);
            t.data[i] = gc;
        }
    }
    t
}
