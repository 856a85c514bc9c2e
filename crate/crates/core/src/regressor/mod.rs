//! Direct expression regression from face intensities.
//!
//! A small feed-forward network `f({W, b}, I) -> eta` built from dense,
//! 3×3-style "same" convolutions, 2×2 average pooling and rectifier layers.
//! Activations are flat `channel × row × col` vectors.

use std::borrow::Borrow;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ExpressionCoeffs;
use crate::seed;

pub mod checkpoint;
pub mod preprocess;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use preprocess::{preprocess, DatasetMean, FaceRaster, BBOX_EXPANSION};
pub use train::{predict_dataset, train, EpochRecord, TrainConfig};

pub const DEFAULT_INPUT_SIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Convolution,
    Pooling,
    Rectifier,
}

/// Weights and bias of one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Params {
    fn zeros_like(&self) -> Params {
        Params {
            weights: DMatrix::zeros(self.weights.nrows(), self.weights.ncols()),
            bias: DVector::zeros(self.bias.len()),
        }
    }

    fn add_assign(&mut self, other: &Params) {
        self.weights += &other.weights;
        self.bias += &other.bias;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `y = W x + b`, `W` is `outputs × inputs`.
    Dense { params: Params },
    /// Stride-1 convolution with zero "same" padding; `W` is
    /// `out_channels × (in_channels·kernel²)` with columns ordered
    /// `(in_channel, ky, kx)`. `kernel` must be odd.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        height: usize,
        width: usize,
        params: Params,
    },
    /// 2×2 average pooling, stride 2.
    Pool { channels: usize, height: usize, width: usize },
    Relu { size: usize },
}

impl Layer {
    pub fn dense(inputs: usize, outputs: usize) -> Layer {
        Layer::Dense {
            params: Params { weights: DMatrix::zeros(outputs, inputs), bias: DVector::zeros(outputs) },
        }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, height: usize, width: usize) -> Layer {
        Layer::Conv {
            in_channels,
            out_channels,
            kernel,
            height,
            width,
            params: Params {
                weights: DMatrix::zeros(out_channels, in_channels * kernel * kernel),
                bias: DVector::zeros(out_channels),
            },
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense { .. } => LayerKind::Dense,
            Layer::Conv { .. } => LayerKind::Convolution,
            Layer::Pool { .. } => LayerKind::Pooling,
            Layer::Relu { .. } => LayerKind::Rectifier,
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            Layer::Dense { params } => params.weights.ncols(),
            Layer::Conv { in_channels, height, width, .. } => in_channels * height * width,
            Layer::Pool { channels, height, width } => channels * height * width,
            Layer::Relu { size } => *size,
        }
    }

    pub fn output_size(&self) -> usize {
        match self {
            Layer::Dense { params } => params.weights.nrows(),
            Layer::Conv { out_channels, height, width, .. } => out_channels * height * width,
            Layer::Pool { channels, height, width } => channels * (height / 2) * (width / 2),
            Layer::Relu { size } => *size,
        }
    }

    pub fn params(&self) -> Option<&Params> {
        match self {
            Layer::Dense { params } | Layer::Conv { params, .. } => Some(params),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut Params> {
        match self {
            Layer::Dense { params } | Layer::Conv { params, .. } => Some(params),
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        self.params().map_or(0, |p| p.weights.ncols())
    }

    fn validate(&self) -> Result<()> {
        match self {
            Layer::Dense { params } => {
                if params.bias.len() != params.weights.nrows() {
                    return Err(Error::contract("dense bias length differs from output count"));
                }
            }
            Layer::Conv { in_channels, out_channels, kernel, params, height, width } => {
                if kernel % 2 == 0 {
                    return Err(Error::contract(format!("convolution kernel {kernel} must be odd")));
                }
                if params.weights.shape() != (*out_channels, in_channels * kernel * kernel)
                    || params.bias.len() != *out_channels
                {
                    return Err(Error::contract("convolution weight shape disagrees with descriptor"));
                }
                if *height == 0 || *width == 0 {
                    return Err(Error::contract("convolution over an empty plane"));
                }
            }
            Layer::Pool { height, width, .. } => {
                if height % 2 != 0 || width % 2 != 0 {
                    return Err(Error::contract(format!("2x2 pooling needs even sides, got {height}x{width}")));
                }
            }
            Layer::Relu { .. } => {}
        }
        if let Some(p) = self.params() {
            if !p.weights.iter().chain(p.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::validation("layer weights contain non-finite values"));
            }
        }
        Ok(())
    }
}

/// Gradient with the same layout as the network: one entry per layer,
/// `None` for parameterless layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub layers: Vec<Option<Params>>,
}

impl Gradient {
    pub fn zeros_like(net: &RegressorNet) -> Gradient {
        Gradient { layers: net.layers.iter().map(|l| l.params().map(Params::zeros_like)).collect() }
    }

    fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                a.add_assign(b);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorNet {
    pub layers: Vec<Layer>,
    pub input_side: usize,
    pub output_dim: usize,
}

/// Knobs for [`RegressorNet::conv_net`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Architecture {
    pub input_side: usize,
    pub output_dim: usize,
    pub conv_channels: [usize; 2],
    pub kernel: usize,
    pub hidden: usize,
}

impl Architecture {
    /// Two convolution+pool blocks and two dense layers, about 70K
    /// parameters at the default 32-pixel input.
    pub fn default_for(output_dim: usize) -> Self {
        Architecture { input_side: DEFAULT_INPUT_SIDE, output_dim, conv_channels: [4, 8], kernel: 3, hidden: 128 }
    }
}

impl RegressorNet {
    pub fn new(layers: Vec<Layer>, input_side: usize, output_dim: usize) -> Result<Self> {
        let net = RegressorNet { layers, input_side, output_dim };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        let mut size = self.input_side * self.input_side;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if layer.input_size() != size {
                return Err(Error::contract(format!(
                    "layer {i} expects {} inputs but receives {size}",
                    layer.input_size()
                )));
            }
            size = layer.output_size();
        }
        if size != self.output_dim {
            return Err(Error::contract(format!(
                "network produces {size} outputs, expected {}",
                self.output_dim
            )));
        }
        Ok(())
    }

    pub fn conv_net(arch: &Architecture, seed: u64) -> Result<Self> {
        let side = arch.input_side;
        if side % 4 != 0 {
            return Err(Error::contract(format!("input side {side} must be a multiple of 4")));
        }
        let [c1, c2] = arch.conv_channels;
        let k = arch.kernel;
        let flat = c2 * (side / 4) * (side / 4);
        let layers = vec![
            Layer::conv(1, c1, k, side, side),
            Layer::Relu { size: c1 * side * side },
            Layer::Pool { channels: c1, height: side, width: side },
            Layer::conv(c1, c2, k, side / 2, side / 2),
            Layer::Relu { size: c2 * side * side / 4 },
            Layer::Pool { channels: c2, height: side / 2, width: side / 2 },
            Layer::dense(flat, arch.hidden),
            Layer::Relu { size: arch.hidden },
            Layer::dense(arch.hidden, arch.output_dim),
        ];
        let mut net = RegressorNet::new(layers, side, arch.output_dim)?;
        net.init_weights(seed);
        Ok(net)
    }

    /// Fan-in scaled uniform initialization, `U(±sqrt(6 / fan_in))`, zero biases.
    pub fn init_weights(&mut self, seed: u64) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let fan_in = layer.fan_in();
            if let Some(p) = layer.params_mut() {
                let mut rng = seed::derived_rng(seed, "regressor/init", i as u64);
                let limit = (6.0 / fan_in.max(1) as f64).sqrt();
                p.weights.iter_mut().for_each(|w| *w = rng.random_range(-limit..limit));
                p.bias.fill(0.0);
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().filter_map(Layer::params).map(|p| p.weights.len() + p.bias.len()).sum()
    }

    fn check_input(&self, input: &FaceRaster) -> Result<()> {
        if input.side() != self.input_side {
            return Err(Error::contract(format!(
                "input is {0}x{0}, network expects {1}x{1}",
                input.side(),
                self.input_side
            )));
        }
        Ok(())
    }

    /// Every intermediate activation for one input: element 0 is the input,
    /// element `i + 1` the output of layer `i`.
    pub fn activations(&self, input: &FaceRaster) -> Result<Vec<DVector<f64>>> {
        self.check_input(input)?;
        Ok(self.forward_trace(input.data()))
    }

    /// All activations: `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    fn forward_trace(&self, input: &DVector<f64>) -> Vec<DVector<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        for layer in &self.layers {
            let next = layer_forward(layer, acts.last().unwrap());
            acts.push(next);
        }
        acts
    }

    /// Backpropagates `d loss / d output` through every layer.
    fn backward(&self, acts: &[DVector<f64>], grad_out: DVector<f64>) -> Gradient {
        let mut grads: Vec<Option<Params>> = vec![None; self.layers.len()];
        let mut g = grad_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (gin, gp) = layer_backward(layer, &acts[i], &acts[i + 1], &g, i > 0);
            grads[i] = gp;
            g = gin;
        }
        Gradient { layers: grads }
    }
}

fn layer_forward(layer: &Layer, x: &DVector<f64>) -> DVector<f64> {
    match layer {
        Layer::Dense { params } => {
            let mut y = params.bias.clone();
            y.gemv(1.0, &params.weights, x, 1.0);
            y
        }
        Layer::Conv { in_channels, out_channels, kernel, height, width, params } => {
            conv_forward(x, &params.weights, &params.bias, *in_channels, *out_channels, *kernel, *height, *width)
        }
        Layer::Pool { channels, height, width } => {
            let (oh, ow) = (height / 2, width / 2);
            let mut y = DVector::zeros(channels * oh * ow);
            for c in 0..*channels {
                let base = c * height * width;
                for r in 0..oh {
                    for col in 0..ow {
                        let i = base + 2 * r * width + 2 * col;
                        y[c * oh * ow + r * ow + col] = 0.25 * (x[i] + x[i + 1] + x[i + width] + x[i + width + 1]);
                    }
                }
            }
            y
        }
        Layer::Relu { .. } => x.map(|v| v.max(0.0)),
    }
}

/// Returns `(d loss / d input, parameter gradient)`. The input gradient is
/// skipped (left empty) for the first layer.
fn layer_backward(
    layer: &Layer,
    x: &DVector<f64>,
    y: &DVector<f64>,
    g: &DVector<f64>,
    need_input_grad: bool,
) -> (DVector<f64>, Option<Params>) {
    match layer {
        Layer::Dense { params } => {
            let gw = g * x.transpose();
            let gin = if need_input_grad { params.weights.tr_mul(g) } else { DVector::zeros(0) };
            (gin, Some(Params { weights: gw, bias: g.clone() }))
        }
        Layer::Conv { in_channels, out_channels, kernel, height, width, params } => {
            let hw = height * width;
            let cols = im2col(x, *in_channels, *kernel, *height, *width);
            let gmat = DMatrix::from_column_slice(hw, *out_channels, g.as_slice());
            let gw = gmat.tr_mul(&cols);
            let gb = DVector::from_iterator(*out_channels, gmat.column_iter().map(|c| c.sum()));
            let gin = if need_input_grad {
                let gcols = gmat * &params.weights;
                col2im(&gcols, *in_channels, *kernel, *height, *width)
            } else {
                DVector::zeros(0)
            };
            (gin, Some(Params { weights: gw, bias: gb }))
        }
        Layer::Pool { channels, height, width } => {
            let (oh, ow) = (height / 2, width / 2);
            let mut gin = DVector::zeros(channels * height * width);
            for c in 0..*channels {
                let base = c * height * width;
                for r in 0..oh {
                    for col in 0..ow {
                        let gv = 0.25 * g[c * oh * ow + r * ow + col];
                        let i = base + 2 * r * width + 2 * col;
                        gin[i] = gv;
                        gin[i + 1] = gv;
                        gin[i + width] = gv;
                        gin[i + width + 1] = gv;
                    }
                }
            }
            (gin, None)
        }
        Layer::Relu { .. } => {
            (g.zip_map(y, |gv, yv| if yv > 0.0 { gv } else { 0.0 }), None)
        }
    }
}

/// Same-padded convolution accumulated tap by tap over contiguous row
/// segments.
#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &DVector<f64>,
    weights: &DMatrix<f64>,
    bias: &DVector<f64>,
    in_channels: usize,
    out_channels: usize,
    k: usize,
    h: usize,
    w: usize,
) -> DVector<f64> {
    // Zero-padded planes turn every tap into one contiguous multiply-add;
    // border columns of the accumulator are discarded afterwards.
    let p = k / 2;
    let (pw, ph) = (w + 2 * p, h + 2 * p);
    let mut padded = vec![0.0; in_channels * ph * pw];
    for c in 0..in_channels {
        for r in 0..h {
            let dst = (c * ph + r + p) * pw + p;
            padded[dst..dst + w].copy_from_slice(&x.as_slice()[(c * h + r) * w..(c * h + r + 1) * w]);
        }
    }
    let (lo, hi) = (p * pw + p, (h - 1 + p) * pw + w + p);
    let mut acc = vec![0.0; ph * pw];
    let mut y = vec![0.0; out_channels * h * w];
    for (o, plane_out) in y.chunks_exact_mut(h * w).enumerate() {
        acc.fill(bias[o]);
        for c in 0..in_channels {
            let plane = &padded[c * ph * pw..(c + 1) * ph * pw];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weights[(o, (c * k + ky) * k + kx)];
                    let src0 = lo + ky * pw + kx - p * pw - p;
                    for (d, s) in acc[lo..hi].iter_mut().zip(&plane[src0..src0 + hi - lo]) {
                        *d += wv * s;
                    }
                }
            }
        }
        for r in 0..h {
            let src = (r + p) * pw + p;
            plane_out[r * w..(r + 1) * w].copy_from_slice(&acc[src..src + w]);
        }
    }
    DVector::from_vec(y)
}

/// `(h·w) × (channels·k²)` patch matrix with zero padding.
fn im2col(x: &DVector<f64>, channels: usize, k: usize, h: usize, w: usize) -> DMatrix<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = DMatrix::zeros(hw, channels * k * k);
    for c in 0..channels {
        let plane = &x.as_slice()[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let col = (c * k + ky) * k + kx;
                let dst = cols.column_mut(col);
                let dst = dst.data.into_slice_mut();
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for r in 0..h {
                    let sr = r as isize + dy;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let c0 = (-dx).max(0) as usize;
                    let c1 = (w as isize - dx).min(w as isize) as usize;
                    let src_row = sr as usize * w;
                    for cc in c0..c1 {
                        dst[r * w + cc] = plane[src_row + (cc as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &DMatrix<f64>, channels: usize, k: usize, h: usize, w: usize) -> DVector<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut out = DVector::zeros(channels * hw);
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let col = (c * k + ky) * k + kx;
                let src = cols.column(col);
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for r in 0..h {
                    let sr = r as isize + dy;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let c0 = (-dx).max(0) as usize;
                    let c1 = (w as isize - dx).min(w as isize) as usize;
                    for cc in c0..c1 {
                        out[c * hw + sr as usize * w + (cc as isize + dx) as usize] += src[r * w + cc];
                    }
                }
            }
        }
    }
    out
}

pub fn forward(net: &RegressorNet, input: &FaceRaster) -> Result<ExpressionCoeffs> {
    net.check_input(input)?;
    let mut x = input.data().clone();
    for layer in &net.layers {
        x = layer_forward(layer, &x);
    }
    Ok(ExpressionCoeffs(x))
}

/// Items per fixed-size chunk when accumulating a batch gradient. Chunk
/// sums are combined in order, so the result does not depend on threads.
const GRAD_CHUNK: usize = 4;

/// Data loss `mean_i ‖f(I_i) − eta_i‖²` plus `0.5·weight_decay·Σ‖W‖²` over
/// weight matrices (biases excluded), and its gradient.
pub fn loss_and_gradient<T>(net: &RegressorNet, batch: &[T], weight_decay: f64) -> Result<(f64, Gradient)>
where
    T: Borrow<(FaceRaster, ExpressionCoeffs)> + Sync,
{
    if batch.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    for item in batch {
        let (x, y) = item.borrow();
        net.check_input(x)?;
        if y.len() != net.output_dim {
            return Err(Error::contract(format!(
                "target has length {}, network output is {}",
                y.len(),
                net.output_dim
            )));
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let partials: Vec<(f64, Gradient)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut loss = 0.0;
            let mut grad: Option<Gradient> = None;
            for item in chunk {
                let (x, y) = item.borrow();
                let acts = net.forward_trace(x.data());
                let diff = acts.last().unwrap() - &y.0;
                loss += diff.norm_squared();
                let g = net.backward(&acts, diff * (2.0 * scale));
                match grad.as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grad = Some(g),
                }
            }
            (loss, grad.unwrap())
        })
        .collect();

    let mut iter = partials.into_iter();
    let (mut data_loss, mut grad) = iter.next().unwrap();
    for (l, g) in iter {
        data_loss += l;
        grad.add_assign(&g);
    }
    data_loss *= scale;

    let mut decay = 0.0;
    for (layer, g) in net.layers.iter().zip(grad.layers.iter_mut()) {
        if let (Some(p), Some(g)) = (layer.params(), g.as_mut()) {
            decay += p.weights.norm_squared();
            g.weights += &p.weights * weight_decay;
        }
    }
    Ok((data_loss + 0.5 * weight_decay * decay, grad))
}

/// Mean squared error `mean_i ‖f(I_i) − eta_i‖²` without regularization.
pub fn mean_squared_error<T>(net: &RegressorNet, data: &[T]) -> Result<f64>
where
    T: Borrow<(FaceRaster, ExpressionCoeffs)> + Sync,
{
    if data.is_empty() {
        return Err(Error::validation("empty dataset"));
    }
    let errs: Result<Vec<f64>> = data
        .par_iter()
        .map(|item| {
            let (x, y) = item.borrow();
            Ok((forward(net, x)?.0 - &y.0).norm_squared())
        })
        .collect();
    Ok(errs?.iter().sum::<f64>() / data.len() as f64)
}
