//! A small single-stage convolutional detector with hand-written backpropagation.
//!
//! The backbone is a stack of strided `conv → ReLU` blocks; each pyramid level
//! attaches a linear convolutional head to one backbone output. Every head
//! location carries `boxes_per_cell × (C + 1 + 4)` channels: class logits
//! followed by the four box offsets for each default box.

use ndarray::{Array2, Array4, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Image;

use super::boxes::{build_default_boxes, AnchorLevel, DefaultBoxSet};
use super::grid::{softmax_into, GridGrad, PredictionGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// One pyramid level: which backbone block it reads and its default boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    /// Index of the backbone block whose output feeds this head.
    pub source: usize,
    pub kernel: usize,
    pub scale: f64,
    pub aspect_ratios: Vec<f64>,
}

/// Architecture descriptor. Input images are square `input_size × input_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_size: usize,
    pub in_channels: usize,
    /// Foreground classes `C`; the model predicts `C + 1` including background.
    pub num_classes: usize,
    pub backbone: Vec<ConvSpec>,
    pub heads: Vec<HeadSpec>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::toy()
    }
}

fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> ConvSpec {
    ConvSpec {
        out_channels,
        kernel,
        stride,
        padding,
    }
}

impl ArchConfig {
    /// Four conv blocks on 96×96 input with 8×8 and 4×4 pyramid levels.
    pub fn toy() -> Self {
        Self {
            input_size: 96,
            in_channels: 3,
            num_classes: 3,
            backbone: vec![
                conv(16, 3, 2, 1),
                conv(24, 3, 2, 1),
                conv(32, 3, 3, 0),
                conv(32, 3, 2, 1),
            ],
            heads: vec![
                HeadSpec {
                    source: 2,
                    kernel: 3,
                    scale: 0.2,
                    aspect_ratios: vec![1.0, 2.0, 0.5],
                },
                HeadSpec {
                    source: 3,
                    kernel: 3,
                    scale: 0.4,
                    aspect_ratios: vec![1.0, 2.0, 0.5],
                },
            ],
        }
    }

    /// A few hundred parameters on 8×8 input; used for gradient checking.
    pub fn tiny() -> Self {
        Self {
            input_size: 8,
            in_channels: 3,
            num_classes: 2,
            backbone: vec![conv(2, 3, 2, 1), conv(3, 3, 2, 1)],
            heads: vec![
                HeadSpec {
                    source: 0,
                    kernel: 3,
                    scale: 0.3,
                    aspect_ratios: vec![1.0],
                },
                HeadSpec {
                    source: 1,
                    kernel: 1,
                    scale: 0.6,
                    aspect_ratios: vec![1.0, 2.0],
                },
            ],
        }
    }

    /// Values per default box: `C + 1` logits and 4 offsets.
    pub fn outputs_per_box(&self) -> usize {
        self.num_classes + 1 + 4
    }

    /// Spatial size after each backbone block.
    pub fn feature_sizes(&self) -> Vec<usize> {
        let mut size = self.input_size;
        self.backbone
            .iter()
            .map(|c| {
                size = (size + 2 * c.padding).saturating_sub(c.kernel) / c.stride + 1;
                size
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("architecture needs at least one foreground class"));
        }
        if self.backbone.is_empty() || self.heads.is_empty() {
            return Err(Error::config("architecture needs a backbone and at least one head"));
        }
        let mut size = self.input_size;
        for (i, c) in self.backbone.iter().enumerate() {
            if c.out_channels == 0 || c.kernel == 0 || c.stride == 0 {
                return Err(Error::config(format!("backbone block {i} has a zero dimension")));
            }
            if size + 2 * c.padding < c.kernel {
                return Err(Error::config(format!(
                    "backbone block {i}: kernel larger than padded input"
                )));
            }
            size = (size + 2 * c.padding - c.kernel) / c.stride + 1;
        }
        for (i, h) in self.heads.iter().enumerate() {
            if h.source >= self.backbone.len() {
                return Err(Error::config(format!(
                    "head {i} reads backbone block {} which does not exist",
                    h.source
                )));
            }
            if h.kernel % 2 == 0 {
                return Err(Error::config(format!("head {i} needs an odd kernel")));
            }
        }
        Ok(())
    }

    pub fn anchor_levels(&self) -> Vec<AnchorLevel> {
        let sizes = self.feature_sizes();
        self.heads
            .iter()
            .map(|h| AnchorLevel {
                grid_height: sizes[h.source],
                grid_width: sizes[h.source],
                scale: h.scale,
                aspect_ratios: h.aspect_ratios.clone(),
            })
            .collect()
    }

    pub fn default_boxes(&self) -> Result<DefaultBoxSet> {
        self.validate()?;
        build_default_boxes(&self.anchor_levels())
    }

    fn layer_layouts(&self) -> (Vec<LayerLayout>, Vec<LayerLayout>, usize) {
        let mut offset = 0;
        let mut channels = self.in_channels;
        let mut backbone = Vec::with_capacity(self.backbone.len());
        let mut block_channels = Vec::with_capacity(self.backbone.len());
        for c in &self.backbone {
            let layout = LayerLayout::new(offset, channels, c.out_channels, c.kernel, c.stride, c.padding);
            offset = layout.end();
            channels = c.out_channels;
            block_channels.push(channels);
            backbone.push(layout);
        }
        let mut heads = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let out = h.aspect_ratios.len() * self.outputs_per_box();
            let layout = LayerLayout::new(offset, block_channels[h.source], out, h.kernel, 1, h.kernel / 2);
            offset = layout.end();
            heads.push(layout);
        }
        (backbone, heads, offset)
    }

    pub fn num_params(&self) -> usize {
        self.layer_layouts().2
    }
}

/// Where one convolution's weights `[out, in, k, k]` and bias `[out]` live in θ.
#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    weight: usize,
    bias: usize,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl LayerLayout {
    fn new(
        offset: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            weight: offset,
            bias: offset + out_channels * in_channels * kernel * kernel,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn end(&self) -> usize {
        self.bias + self.out_channels
    }

    fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn weights<'a>(&self, theta: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.out_channels, self.patch_len()), &theta[self.weight..self.bias])
            .expect("weight slice matches layout")
    }
}

/// Output columns `lo..hi` whose kernel tap `kj` lands inside a row of width `w`.
fn valid_range(kj: usize, l: &LayerLayout, w: usize, wo: usize) -> (usize, usize) {
    let lo = l.padding.saturating_sub(kj).div_ceil(l.stride);
    let hi = (w + l.padding).saturating_sub(kj).div_ceil(l.stride).min(wo);
    (lo.min(hi), hi)
}

/// Unfolds `input` into a `[C·k·k, N·Ho·Wo]` patch matrix.
fn im2col(input: &Array4<f64>, l: &LayerLayout) -> Array2<f64> {
    let (n, c, h, w) = input.dim();
    let (ho, wo) = (l.out_size(h), l.out_size(w));
    let cols = n * ho * wo;
    let k = l.kernel;
    let src = input.as_slice().expect("activations are contiguous");
    let mut out = vec![0.0; c * k * k * cols];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let (lo, hi) = valid_range(kj, l, w, wo);
                let dst = &mut out[row * cols..(row + 1) * cols];
                for b in 0..n {
                    let plane = &src[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    for oh in 0..ho {
                        let ih = (oh * l.stride + ki) as isize - l.padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src_row = &plane[ih as usize * w..(ih as usize + 1) * w];
                        let dst_row = &mut dst[(b * ho + oh) * wo..(b * ho + oh + 1) * wo];
                        let first = kj as isize - l.padding as isize;
                        for (d, &v) in dst_row[lo..hi].iter_mut().zip(
                            src_row[(first + (lo * l.stride) as isize) as usize..]
                                .iter()
                                .step_by(l.stride),
                        ) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, cols), out).expect("patch matrix shape")
}

/// Adjoint of [`im2col`].
fn col2im(cols: ArrayView2<f64>, l: &LayerLayout, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    let (n, c, h, w) = shape;
    let (ho, wo) = (l.out_size(h), l.out_size(w));
    let ncols = n * ho * wo;
    let k = l.kernel;
    let src = cols.as_slice().expect("patch gradient is contiguous");
    let mut out = vec![0.0; n * c * h * w];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let (lo, hi) = valid_range(kj, l, w, wo);
                let s = &src[row * ncols..(row + 1) * ncols];
                for b in 0..n {
                    let plane = &mut out[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    for oh in 0..ho {
                        let ih = (oh * l.stride + ki) as isize - l.padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                        let s_row = &s[(b * ho + oh) * wo..(b * ho + oh + 1) * wo];
                        let first = kj as isize - l.padding as isize;
                        for (d, &g) in dst_row[(first + (lo * l.stride) as isize) as usize..]
                            .iter_mut()
                            .step_by(l.stride)
                            .zip(&s_row[lo..hi])
                        {
                            *d += g;
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((n, c, h, w), out).expect("input gradient shape")
}

fn conv_forward(input: &Array4<f64>, l: &LayerLayout, theta: &[f64]) -> (Array4<f64>, Array2<f64>) {
    let (n, _, h, w) = input.dim();
    let (ho, wo) = (l.out_size(h), l.out_size(w));
    let cols = im2col(input, l);
    let prod = l.weights(theta).dot(&cols);
    let bias = &theta[l.bias..l.end()];
    let plane = ho * wo;
    let mut out = vec![0.0; n * l.out_channels * plane];
    let prod = prod.as_standard_layout();
    let p = prod.as_slice().expect("contiguous product");
    for co in 0..l.out_channels {
        let row = &p[co * n * plane..(co + 1) * n * plane];
        for b in 0..n {
            let dst = &mut out[(b * l.out_channels + co) * plane..(b * l.out_channels + co + 1) * plane];
            for (d, &v) in dst.iter_mut().zip(&row[b * plane..(b + 1) * plane]) {
                *d = v + bias[co];
            }
        }
    }
    let out = Array4::from_shape_vec((n, l.out_channels, ho, wo), out).expect("conv output shape");
    (out, cols)
}

/// Accumulates weight/bias gradients into `param_grad` and returns the input
/// gradient when `need_input` is set.
fn conv_backward(
    dout: &Array4<f64>,
    cols: &Array2<f64>,
    l: &LayerLayout,
    theta: &[f64],
    input_shape: (usize, usize, usize, usize),
    param_grad: &mut [f64],
    need_input: bool,
) -> Option<Array4<f64>> {
    let (n, co, ho, wo) = dout.dim();
    let plane = ho * wo;
    let src = dout.as_slice().expect("contiguous output gradient");
    let mut dmat = vec![0.0; co * n * plane];
    for c in 0..co {
        for b in 0..n {
            dmat[(c * n + b) * plane..(c * n + b + 1) * plane]
                .copy_from_slice(&src[(b * co + c) * plane..(b * co + c + 1) * plane]);
        }
    }
    let dmat = Array2::from_shape_vec((co, n * plane), dmat).expect("gradient matrix shape");
    let dw = dmat.dot(&cols.t());
    for (g, v) in param_grad[l.weight..l.bias].iter_mut().zip(dw.iter()) {
        *g += v;
    }
    for (g, v) in param_grad[l.bias..l.end()]
        .iter_mut()
        .zip(dmat.sum_axis(Axis(1)).iter())
    {
        *g += v;
    }
    if !need_input {
        return None;
    }
    let dcols = l.weights(theta).t().dot(&dmat);
    Some(col2im(dcols.view(), l, input_shape))
}

/// Intermediate values kept from a training forward pass.
#[derive(Debug)]
pub struct Tape {
    batch: usize,
    /// Backbone inputs' patch matrices and block outputs (post-ReLU).
    backbone_cols: Vec<Array2<f64>>,
    activations: Vec<Array4<f64>>,
    head_cols: Vec<Array2<f64>>,
    grids: Vec<PredictionGrid>,
}

impl Tape {
    pub fn grids(&self) -> &[PredictionGrid] {
        &self.grids
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

/// The detector contract used by the trainer.
pub trait DetectorModel {
    fn arch(&self) -> &ArchConfig;
    fn default_boxes(&self) -> &DefaultBoxSet;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// Evaluation-mode forward pass.
    fn forward(&self, images: &[Image]) -> Result<Vec<PredictionGrid>>;

    /// Forward pass that keeps what [`DetectorModel::backward`] needs.
    fn forward_train(&self, images: &[Image]) -> Result<(Vec<PredictionGrid>, Tape)>;

    /// Accumulates `∂L/∂θ` into `param_grad` given `∂L/∂grid` for every image of the tape.
    fn backward(&self, tape: &Tape, grads: &[GridGrad], param_grad: &mut [f64]) -> Result<()>;
}

/// Convolutional implementation of [`DetectorModel`].
#[derive(Debug, Clone)]
pub struct ConvDetector {
    arch: ArchConfig,
    boxes: DefaultBoxSet,
    theta: Vec<f64>,
    backbone: Vec<LayerLayout>,
    heads: Vec<LayerLayout>,
}

impl ConvDetector {
    /// He-initialized backbone, small-variance heads, zero biases.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        let mut model = Self::from_params(arch.clone(), vec![0.0; arch.num_params()])?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layouts: Vec<(LayerLayout, bool)> = model
            .backbone
            .iter()
            .map(|l| (*l, true))
            .chain(model.heads.iter().map(|l| (*l, false)))
            .collect();
        for (l, is_backbone) in layouts {
            let std = if is_backbone {
                (2.0 / l.patch_len() as f64).sqrt()
            } else {
                (1.0 / l.patch_len() as f64).sqrt() * 0.1
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            for w in &mut model.theta[l.weight..l.bias] {
                *w = normal.sample(&mut rng);
            }
        }
        Ok(model)
    }

    pub fn from_params(arch: ArchConfig, theta: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let boxes = arch.default_boxes()?;
        let (backbone, heads, total) = arch.layer_layouts();
        if theta.len() != total {
            return Err(Error::shape(format!(
                "parameter vector has {} values, architecture needs {}",
                theta.len(),
                total
            )));
        }
        Ok(Self {
            arch,
            boxes,
            theta,
            backbone,
            heads,
        })
    }

    pub fn into_params(self) -> Vec<f64> {
        self.theta
    }

    fn stack(&self, images: &[Image]) -> Result<Array4<f64>> {
        if images.is_empty() {
            return Err(Error::shape("empty image batch"));
        }
        let (c, s) = (self.arch.in_channels, self.arch.input_size);
        let mut data = Vec::with_capacity(images.len() * c * s * s);
        for (i, img) in images.iter().enumerate() {
            if img.channels != c || img.height != s || img.width != s {
                return Err(Error::shape(format!(
                    "image {i} is {}x{}x{}, model expects {c}x{s}x{s}",
                    img.channels, img.height, img.width
                )));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Array4::from_shape_vec((images.len(), c, s, s), data).expect("batch shape"))
    }

    fn run(&self, images: &[Image], keep: bool) -> Result<(Vec<PredictionGrid>, Option<Tape>)> {
        let mut x = self.stack(images)?;
        let n = images.len();
        let mut backbone_cols = Vec::new();
        let mut activations = Vec::with_capacity(self.backbone.len());
        for l in &self.backbone {
            let (mut y, cols) = conv_forward(&x, l, &self.theta);
            y.mapv_inplace(|v| v.max(0.0));
            if keep {
                backbone_cols.push(cols);
            }
            activations.push(y.clone());
            x = y;
        }
        let width = self.arch.num_classes + 1;
        let per_box = self.arch.outputs_per_box();
        let k_total = self.boxes.len();
        let mut cls = vec![vec![0.0; k_total * width]; n];
        let mut loc = vec![vec![[0.0; 4]; k_total]; n];
        let mut head_cols = Vec::new();
        for (p, (l, spec)) in self.heads.iter().zip(&self.arch.heads).enumerate() {
            let (out, cols) = conv_forward(&activations[spec.source], l, &self.theta);
            if keep {
                head_cols.push(cols);
            }
            let (_, _, gh, gw) = out.dim();
            let d_count = spec.aspect_ratios.len();
            let base = self.boxes.level_offset(p);
            let mut logits = vec![0.0; width];
            for b in 0..n {
                for r in 0..gh {
                    for c in 0..gw {
                        for d in 0..d_count {
                            let k = base + (r * gw + c) * d_count + d;
                            let ch = d * per_box;
                            for (j, z) in logits.iter_mut().enumerate() {
                                *z = out[[b, ch + j, r, c]];
                            }
                            softmax_into(&logits, &mut cls[b][k * width..(k + 1) * width]);
                            for t in 0..4 {
                                loc[b][k][t] = out[[b, ch + width + t, r, c]];
                            }
                        }
                    }
                }
            }
        }
        let grids: Vec<PredictionGrid> = cls
            .into_iter()
            .zip(loc)
            .map(|(c, l)| PredictionGrid::new(width, c, l))
            .collect::<Result<_>>()?;
        let tape = keep.then(|| Tape {
            batch: n,
            backbone_cols,
            activations,
            head_cols,
            grids: grids.clone(),
        });
        Ok((grids, tape))
    }
}

impl DetectorModel for ConvDetector {
    fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    fn default_boxes(&self) -> &DefaultBoxSet {
        &self.boxes
    }

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn forward(&self, images: &[Image]) -> Result<Vec<PredictionGrid>> {
        Ok(self.run(images, false)?.0)
    }

    fn forward_train(&self, images: &[Image]) -> Result<(Vec<PredictionGrid>, Tape)> {
        let (grids, tape) = self.run(images, true)?;
        Ok((grids, tape.expect("tape requested")))
    }

    fn backward(&self, tape: &Tape, grads: &[GridGrad], param_grad: &mut [f64]) -> Result<()> {
        if grads.len() != tape.batch {
            return Err(Error::shape(format!(
                "{} grid gradients for a batch of {}",
                grads.len(),
                tape.batch
            )));
        }
        if param_grad.len() != self.theta.len() {
            return Err(Error::shape("parameter gradient has the wrong length"));
        }
        let n = tape.batch;
        let width = self.arch.num_classes + 1;
        let per_box = self.arch.outputs_per_box();
        let mut dact: Vec<Option<Array4<f64>>> = vec![None; self.backbone.len()];

        for (p, (l, spec)) in self.heads.iter().zip(&self.arch.heads).enumerate() {
            let src = &tape.activations[spec.source];
            let (_, _, gh, gw) = src.dim();
            let (gh, gw) = (l.out_size(gh), l.out_size(gw));
            let d_count = spec.aspect_ratios.len();
            let base = self.boxes.level_offset(p);
            let mut dout = Array4::<f64>::zeros((n, l.out_channels, gh, gw));
            for (b, (grid, g)) in tape.grids.iter().zip(grads).enumerate() {
                for r in 0..gh {
                    for c in 0..gw {
                        for d in 0..d_count {
                            let k = base + (r * gw + c) * d_count + d;
                            let ch = d * per_box;
                            let probs = grid.cls_row(k);
                            let dp = &g.cls[k * width..(k + 1) * width];
                            let dz = &g.logits[k * width..(k + 1) * width];
                            let inner: f64 = probs.iter().zip(dp).map(|(a, b)| a * b).sum();
                            for j in 0..width {
                                dout[[b, ch + j, r, c]] = probs[j] * (dp[j] - inner) + dz[j];
                            }
                            for t in 0..4 {
                                dout[[b, ch + width + t, r, c]] = g.loc[k][t];
                            }
                        }
                    }
                }
            }
            let dinput = conv_backward(&dout, &tape.head_cols[p], l, &self.theta, src.dim(), param_grad, true)
                .expect("input gradient requested");
            match &mut dact[spec.source] {
                Some(acc) => *acc += &dinput,
                slot @ None => *slot = Some(dinput),
            }
        }

        for i in (0..self.backbone.len()).rev() {
            let Some(mut grad) = dact[i].take() else {
                continue;
            };
            let act = &tape.activations[i];
            ndarray::Zip::from(&mut grad).and(act).for_each(|g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
            let input_shape = if i == 0 {
                let s = self.arch.input_size;
                (n, self.arch.in_channels, s, s)
            } else {
                tape.activations[i - 1].dim()
            };
            let dinput = conv_backward(
                &grad,
                &tape.backbone_cols[i],
                &self.backbone[i],
                &self.theta,
                input_shape,
                param_grad,
                i > 0,
            );
            if let Some(dinput) = dinput {
                match &mut dact[i - 1] {
                    Some(acc) => *acc += &dinput,
                    slot @ None => *slot = Some(dinput),
                }
            }
        }
        Ok(())
    }
}
