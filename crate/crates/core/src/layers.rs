//! Layer kinds and their forward/backward kernels.
//!
//! Conv-BN follows the ordering `I' = (a(I * K + b) - mu) / sigma * gamma + beta`:
//! the activation is applied to the convolution output *before* the stored
//! normalization statistics. `mu` and `sigma` are inference-style constants.

use std::fmt;

use crate::error::{invalid_arg, OtoError, Result};
use crate::tensor::{Scalar, Tensor};

/// Zero-preserving activations: every variant maps 0 to exactly 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f32),
    /// PReLU with a frozen slope.
    PRelu(f32),
    /// Tanh approximation of GELU.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(s) | Activation::PRelu(s) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::from_f64(s as f64)
                }
            }
            Activation::Gelu => {
                let v = x.as_f64();
                let inner = GELU_C * (v + GELU_K * v * v * v);
                T::from_f64(0.5 * v * (1.0 + inner.tanh()))
            }
        }
    }

    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(s) | Activation::PRelu(s) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::from_f64(s as f64)
                }
            }
            Activation::Gelu => {
                let v = x.as_f64();
                let inner = GELU_C * (v + GELU_K * v * v * v);
                let t = inner.tanh();
                let d_inner = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                T::from_f64(0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner)
            }
        }
    }

    pub fn parse(token: &str) -> Result<Self> {
        let (name, slope) = match token.split_once('@') {
            Some((n, s)) => {
                let slope: f32 = s
                    .parse()
                    .map_err(|_| invalid_arg(format!("bad activation slope in `{token}`")))?;
                (n, Some(slope))
            }
            None => (token, None),
        };
        match (name, slope) {
            ("relu", None) => Ok(Activation::Relu),
            ("gelu", None) => Ok(Activation::Gelu),
            ("leaky", s) => Ok(Activation::LeakyRelu(s.unwrap_or(0.01))),
            ("prelu", s) => Ok(Activation::PRelu(s.unwrap_or(0.25))),
            _ => Err(invalid_arg(format!("unknown activation `{token}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => write!(f, "relu"),
            Activation::Gelu => write!(f, "gelu"),
            Activation::LeakyRelu(s) => write!(f, "leaky@{s}"),
            Activation::PRelu(s) => write!(f, "prelu@{s}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SoftmaxCrossEntropy,
    MeanSquaredError,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ce" | "cross-entropy" | "softmax-cross-entropy" => Ok(LossKind::SoftmaxCrossEntropy),
            "mse" | "mean-squared-error" => Ok(LossKind::MeanSquaredError),
            _ => Err(invalid_arg(format!("unknown loss `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::SoftmaxCrossEntropy => "ce",
            LossKind::MeanSquaredError => "mse",
        }
    }
}

/// Supervision for one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// Row-major `(batch, outputs)` regression targets.
    Values(Vec<f32>),
}

impl Targets {
    pub fn len_hint(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }
}

/// Mean loss over the batch and its gradient with respect to `output`.
///
/// Cross-entropy is `-(1/B) sum_b log softmax(o_b)[y_b]`; squared error is
/// `(1/B) sum_b ||o_b - y_b||^2`.
pub fn loss_and_grad<T: Scalar>(
    kind: LossKind,
    output: &Tensor<T>,
    targets: &Targets,
) -> Result<(f64, Tensor<T>)> {
    let batch = output.shape()[0];
    let width = output.numel() / batch;
    let out = output.data();
    let mut grad = vec![T::zero(); out.len()];
    let inv_b = 1.0 / batch as f64;
    let mut total = 0.0f64;
    match (kind, targets) {
        (LossKind::SoftmaxCrossEntropy, Targets::Classes(labels)) => {
            if labels.len() != batch {
                return Err(invalid_arg(format!(
                    "{} labels for a batch of {batch}",
                    labels.len()
                )));
            }
            for (b, &y) in labels.iter().enumerate() {
                if y >= width {
                    return Err(invalid_arg(format!("label {y} out of range for {width} classes")));
                }
                let row = &out[b * width..(b + 1) * width];
                let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
                let lse = max + sum.ln();
                total += lse - row[y].as_f64();
                for (j, v) in row.iter().enumerate() {
                    let p = (v.as_f64() - lse).exp();
                    let g = if j == y { p - 1.0 } else { p };
                    grad[b * width + j] = T::from_f64(g * inv_b);
                }
            }
        }
        (LossKind::MeanSquaredError, Targets::Values(values)) => {
            if values.len() != out.len() {
                return Err(invalid_arg(format!(
                    "{} target values for an output of {} elements",
                    values.len(),
                    out.len()
                )));
            }
            for (i, (o, y)) in out.iter().zip(values).enumerate() {
                let d = o.as_f64() - *y as f64;
                total += d * d;
                grad[i] = T::from_f64(2.0 * d * inv_b);
            }
        }
        (LossKind::MeanSquaredError, Targets::Classes(labels)) => {
            // one-hot regression
            if labels.len() != batch {
                return Err(invalid_arg(format!(
                    "{} labels for a batch of {batch}",
                    labels.len()
                )));
            }
            for b in 0..batch {
                for j in 0..width {
                    let y = if labels[b] == j { 1.0 } else { 0.0 };
                    let d = out[b * width + j].as_f64() - y;
                    total += d * d;
                    grad[b * width + j] = T::from_f64(2.0 * d * inv_b);
                }
            }
        }
        (LossKind::SoftmaxCrossEntropy, Targets::Values(_)) => {
            return Err(invalid_arg("cross-entropy needs class labels"));
        }
    }
    Ok((total * inv_b, Tensor::new(output.shape().to_vec(), grad)?))
}

// ---------------------------------------------------------------------------
// Fully connected

/// `y = W x + b` with `W` stored `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || bias.numel() != weight.shape()[0] {
            return Err(invalid_arg(format!(
                "linear weight {:?} / bias {:?} are inconsistent",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Linear { weight, bias })
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub(crate) fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

pub fn linear_forward<T: Scalar>(input: &Tensor<T>, layer: &Linear<T>) -> Result<Tensor<T>> {
    let n = layer.in_features();
    if input.last_extent() != n {
        return Err(invalid_arg(format!(
            "input last extent {} != linear in_features {n}",
            input.last_extent()
        )));
    }
    let m = layer.out_features();
    let rows = input.leading();
    let w = layer.weight.data();
    let b = layer.bias.data();
    let x = input.data();
    let mut out = Vec::with_capacity(rows * m);
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        for i in 0..m {
            let acc = b[i].as_f64() + crate::tensor::dot(&w[i * n..(i + 1) * n], xr);
            out.push(T::from_f64(acc));
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = m;
    Tensor::new(shape, out)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub(crate) fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    layer: &Linear<T>,
    d_out: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let n = layer.in_features();
    let m = layer.out_features();
    let rows = input.leading();
    let w = layer.weight.data();
    let x = input.data();
    let dy = d_out.data();
    let mut dw = vec![0.0f64; m * n];
    let mut db = vec![0.0f64; m];
    let mut dx = vec![0.0f64; rows * n];
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let dxr = &mut dx[r * n..(r + 1) * n];
        for i in 0..m {
            let g = dy[r * m + i].as_f64();
            if g == 0.0 {
                continue;
            }
            db[i] += g;
            let wrow = &w[i * n..(i + 1) * n];
            let dwrow = &mut dw[i * n..(i + 1) * n];
            for j in 0..n {
                dwrow[j] += g * xr[j].as_f64();
                dxr[j] += g * wrow[j].as_f64();
            }
        }
    }
    let to_t = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect::<Vec<T>>();
    (
        Tensor::new(input.shape().to_vec(), to_t(dx)).expect("same shape as input"),
        to_t(dw),
        to_t(db),
    )
}

// ---------------------------------------------------------------------------
// Projection-only multi-head attention

/// Each head is an independent projection; head outputs are concatenated
/// along the feature axis. No query/key interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T: Scalar = f32> {
    pub heads: Vec<Linear<T>>,
}

impl<T: Scalar> Attention<T> {
    pub fn new(heads: Vec<Linear<T>>) -> Result<Self> {
        if heads.is_empty() {
            return Err(invalid_arg("attention needs at least one head"));
        }
        let n = heads[0].in_features();
        if let Some((h, _)) = heads
            .iter()
            .enumerate()
            .find(|(_, h)| h.in_features() != n)
        {
            return Err(invalid_arg(format!(
                "head {h} reads {} features, head 0 reads {n}",
                heads[h].in_features()
            )));
        }
        Ok(Attention { heads })
    }

    pub fn in_features(&self) -> usize {
        self.heads[0].in_features()
    }

    pub fn out_features(&self) -> usize {
        self.heads.iter().map(Linear::out_features).sum()
    }

    /// Offset of head `h` inside the concatenated output.
    pub fn head_offset(&self, h: usize) -> usize {
        self.heads[..h].iter().map(Linear::out_features).sum()
    }
}

pub fn attention_forward<T: Scalar>(input: &Tensor<T>, layer: &Attention<T>) -> Result<Tensor<T>> {
    let n = layer.in_features();
    if input.last_extent() != n {
        return Err(invalid_arg(format!(
            "input last extent {} != attention in_features {n}",
            input.last_extent()
        )));
    }
    let rows = input.leading();
    let total = layer.out_features();
    let mut out = vec![T::zero(); rows * total];
    let mut offset = 0;
    for (h, head) in layer.heads.iter().enumerate() {
        let y = linear_forward(input, head)
            .map_err(|e| invalid_arg(format!("head {h}: {e}")))?;
        let mh = head.out_features();
        if y.last_extent() != mh {
            return Err(invalid_arg(format!("head {h} produced {} outputs, declared {mh}", y.last_extent())));
        }
        for r in 0..rows {
            out[r * total + offset..r * total + offset + mh]
                .copy_from_slice(&y.data()[r * mh..(r + 1) * mh]);
        }
        offset += mh;
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = total;
    Tensor::new(shape, out)
}

// ---------------------------------------------------------------------------
// Conv-BN

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel || pw < self.kernel || self.stride == 0 {
            return Err(invalid_arg(format!(
                "kernel {} (stride {}, padding {}) does not fit a {h}x{w} input",
                self.kernel, self.stride, self.padding
            )));
        }
        Ok(((ph - self.kernel) / self.stride + 1, (pw - self.kernel) / self.stride + 1))
    }
}

/// Convolution with flattened filter matrix `kernel` of shape
/// `(out_channels, in_channels * k * k)`; row `c` is channel `c`'s filter laid
/// out input-channel major, then row-major over the `k x k` window.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn<T: Scalar = f32> {
    pub geometry: ConvGeometry,
    pub activation: Activation,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub mean: Tensor<T>,
    pub std: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> ConvBn<T> {
    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.out_channels();
        if self.kernel.rank() != 2 || self.kernel.shape()[1] != self.geometry.patch_len() {
            return Err(invalid_arg(format!(
                "kernel shape {:?} does not match {} x {} patch",
                self.kernel.shape(),
                m,
                self.geometry.patch_len()
            )));
        }
        for (name, t) in [
            ("bias", &self.bias),
            ("mean", &self.mean),
            ("std", &self.std),
            ("gamma", &self.gamma),
            ("beta", &self.beta),
        ] {
            if t.shape() != [m] {
                return Err(invalid_arg(format!(
                    "{name} has shape {:?}, expected [{m}]",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_std(&self) -> Result<()> {
        if let Some((c, s)) = self
            .std
            .data()
            .iter()
            .enumerate()
            .find(|(_, s)| !(s.as_f64() > 0.0))
        {
            return Err(OtoError::InvalidParameter(format!(
                "std[{c}] = {} must be strictly positive",
                s.as_f64()
            )));
        }
        Ok(())
    }

    pub(crate) fn cast<U: Scalar>(&self) -> ConvBn<U> {
        ConvBn {
            geometry: self.geometry,
            activation: self.activation,
            kernel: self.kernel.cast(),
            bias: self.bias.cast(),
            mean: self.mean.cast(),
            std: self.std.cast(),
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
        }
    }
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ConvCache<T: Scalar> {
    in_shape: Vec<usize>,
    out_hw: (usize, usize),
    /// Per batch item, `(patch_len, oh*ow)` unfolded input.
    cols: Vec<Vec<T>>,
    /// Convolution output before the activation.
    pre: Vec<T>,
}

fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    g: &ConvGeometry,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let k = g.kernel;
    let p = oh * ow;
    let mut cols = vec![T::zero(); c * k * k * p];
    for ic in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ic * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = x[(ic * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(
    dcols: &[f64],
    dx: &mut [f64],
    (c, h, w): (usize, usize, usize),
    g: &ConvGeometry,
    (oh, ow): (usize, usize),
) {
    let k = g.kernel;
    let p = oh * ow;
    for ic in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ic * k + ky) * k + kx;
                let src = &dcols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[(ic * h + iy as usize) * w + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

pub fn conv_bn_forward<T: Scalar>(input: &Tensor<T>, layer: &ConvBn<T>) -> Result<Tensor<T>> {
    conv_bn_forward_cached(input, layer).map(|(y, _)| y)
}

pub(crate) fn conv_bn_forward_cached<T: Scalar>(
    input: &Tensor<T>,
    layer: &ConvBn<T>,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    layer.validate()?;
    layer.check_std()?;
    let g = &layer.geometry;
    if input.rank() != 4 {
        return Err(invalid_arg(format!(
            "conv input must be (batch, channels, h, w), got {:?}",
            input.shape()
        )));
    }
    let (batch, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    if c != g.in_channels {
        return Err(invalid_arg(format!(
            "channel dimension: input has {c}, kernel expects {}",
            g.in_channels
        )));
    }
    let (oh, ow) = g.output_hw(h, w)?;
    let m = layer.out_channels();
    let plen = g.patch_len();
    let p = oh * ow;
    let kmat = layer.kernel.data();
    let bias = layer.bias.data();
    let mean = layer.mean.data();
    let std = layer.std.data();
    let gamma = layer.gamma.data();
    let beta = layer.beta.data();

    let mut cols_all = Vec::with_capacity(batch);
    let mut pre = vec![T::zero(); batch * m * p];
    let mut out = vec![T::zero(); batch * m * p];
    let mut acc = vec![0.0f64; p];
    for b in 0..batch {
        let x = &input.data()[b * c * h * w..(b + 1) * c * h * w];
        let cols = im2col(x, (c, h, w), g, (oh, ow));
        for oc in 0..m {
            acc.iter_mut().for_each(|a| *a = bias[oc].as_f64());
            let krow = &kmat[oc * plen..(oc + 1) * plen];
            for (kk, kv) in krow.iter().enumerate() {
                let kv = kv.as_f64();
                if kv == 0.0 {
                    continue;
                }
                let crow = &cols[kk * p..(kk + 1) * p];
                for (a, cv) in acc.iter_mut().zip(crow) {
                    *a += kv * cv.as_f64();
                }
            }
            let base = (b * m + oc) * p;
            let (mu, sd, ga, be) = (
                mean[oc].as_f64(),
                std[oc].as_f64(),
                gamma[oc].as_f64(),
                beta[oc].as_f64(),
            );
            for (j, a) in acc.iter().enumerate() {
                let o = T::from_f64(*a);
                pre[base + j] = o;
                let act = layer.activation.apply(o).as_f64();
                out[base + j] = T::from_f64((act - mu) / sd * ga + be);
            }
        }
        cols_all.push(cols);
    }
    let y = Tensor::new(vec![batch, m, oh, ow], out)?;
    Ok((
        y,
        ConvCache {
            in_shape: input.shape().to_vec(),
            out_hw: (oh, ow),
            cols: cols_all,
            pre,
        },
    ))
}

pub(crate) struct ConvGrads<T: Scalar> {
    pub d_input: Tensor<T>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub(crate) fn conv_bn_backward<T: Scalar>(
    layer: &ConvBn<T>,
    cache: &ConvCache<T>,
    d_out: &Tensor<T>,
) -> ConvGrads<T> {
    let g = &layer.geometry;
    let (batch, c, h, w) = (
        cache.in_shape[0],
        cache.in_shape[1],
        cache.in_shape[2],
        cache.in_shape[3],
    );
    let (oh, ow) = cache.out_hw;
    let p = oh * ow;
    let m = layer.out_channels();
    let plen = g.patch_len();
    let kmat = layer.kernel.data();
    let mean = layer.mean.data();
    let std = layer.std.data();
    let gamma = layer.gamma.data();
    let dy = d_out.data();

    let mut d_kernel = vec![0.0f64; m * plen];
    let mut d_bias = vec![0.0f64; m];
    let mut d_gamma = vec![0.0f64; m];
    let mut d_beta = vec![0.0f64; m];
    let mut d_input = vec![0.0f64; batch * c * h * w];
    let mut d_pre = vec![0.0f64; m * p];
    let mut dcols = vec![0.0f64; plen * p];
    for b in 0..batch {
        let cols = &cache.cols[b];
        for oc in 0..m {
            let base = (b * m + oc) * p;
            let (mu, sd, ga) = (mean[oc].as_f64(), std[oc].as_f64(), gamma[oc].as_f64());
            for j in 0..p {
                let o = cache.pre[base + j];
                let a = layer.activation.apply(o).as_f64();
                let gy = dy[base + j].as_f64();
                d_gamma[oc] += gy * (a - mu) / sd;
                d_beta[oc] += gy;
                let dp = gy * ga / sd * layer.activation.derivative(o).as_f64();
                d_pre[oc * p + j] = dp;
                d_bias[oc] += dp;
            }
        }
        dcols.iter_mut().for_each(|v| *v = 0.0);
        for oc in 0..m {
            let dprow = &d_pre[oc * p..(oc + 1) * p];
            for kk in 0..plen {
                let crow = &cols[kk * p..(kk + 1) * p];
                let mut s = 0.0f64;
                for (d, cv) in dprow.iter().zip(crow) {
                    s += d * cv.as_f64();
                }
                d_kernel[oc * plen + kk] += s;
                let kv = kmat[oc * plen + kk].as_f64();
                if kv != 0.0 {
                    let drow = &mut dcols[kk * p..(kk + 1) * p];
                    for (dc, d) in drow.iter_mut().zip(dprow) {
                        *dc += kv * d;
                    }
                }
            }
        }
        col2im_add(
            &dcols,
            &mut d_input[b * c * h * w..(b + 1) * c * h * w],
            (c, h, w),
            g,
            (oh, ow),
        );
    }
    let to_t = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect::<Vec<T>>();
    ConvGrads {
        d_input: Tensor::new(cache.in_shape.clone(), to_t(d_input)).expect("input shape"),
        kernel: to_t(d_kernel),
        bias: to_t(d_bias),
        gamma: to_t(d_gamma),
        beta: to_t(d_beta),
    }
}

/// Two Conv-BN branches over the same input whose outputs are summed.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual<T: Scalar = f32> {
    pub left: ConvBn<T>,
    pub right: ConvBn<T>,
}

impl<T: Scalar> Residual<T> {
    pub fn out_channels(&self) -> usize {
        self.left.out_channels()
    }
}

pub fn residual_forward<T: Scalar>(input: &Tensor<T>, layer: &Residual<T>) -> Result<Tensor<T>> {
    let l = conv_bn_forward(input, &layer.left)?;
    let r = conv_bn_forward(input, &layer.right)?;
    add_same_shape(l, &r)
}

pub(crate) fn add_same_shape<T: Scalar>(mut l: Tensor<T>, r: &Tensor<T>) -> Result<Tensor<T>> {
    if l.shape() != r.shape() {
        return Err(OtoError::InvalidModel(format!(
            "residual branches disagree: {:?} vs {:?}",
            l.shape(),
            r.shape()
        )));
    }
    for (a, b) in l.data_mut().iter_mut().zip(r.data()) {
        *a = *a + *b;
    }
    Ok(l)
}

pub fn activation_forward<T: Scalar>(input: &Tensor<T>, act: Activation) -> Tensor<T> {
    let data = input.data().iter().map(|&v| act.apply(v)).collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_1x1(k: f32, b: f32, act: Activation) -> ConvBn<f32> {
        let one = |v: f32| Tensor::new(vec![1], vec![v]).unwrap();
        ConvBn {
            geometry: ConvGeometry {
                in_channels: 1,
                kernel: 1,
                stride: 1,
                padding: 0,
            },
            activation: act,
            kernel: Tensor::new(vec![1, 1], vec![k]).unwrap(),
            bias: one(b),
            mean: one(0.0),
            std: one(1.0),
            gamma: one(1.0),
            beta: one(0.0),
        }
    }

    #[test]
    fn activations_are_exactly_zero_at_zero() {
        for a in [
            Activation::Relu,
            Activation::LeakyRelu(0.1),
            Activation::PRelu(0.25),
            Activation::PRelu(-0.5),
            Activation::Gelu,
        ] {
            assert_eq!(a.apply(0.0f32), 0.0);
            assert_eq!(a.apply(0.0f64), 0.0);
            assert_eq!(a.apply(-0.0f32), 0.0);
        }
    }

    #[test]
    fn activation_tokens_round_trip() {
        for a in [
            Activation::Relu,
            Activation::Gelu,
            Activation::LeakyRelu(0.05),
            Activation::PRelu(0.25),
        ] {
            assert_eq!(Activation::parse(&a.to_string()).unwrap(), a);
        }
        assert!(Activation::parse("tanh").is_err());
    }

    #[test]
    fn zero_filter_gives_zero_output() {
        let layer = conv_1x1(0.0, 0.0, Activation::Relu);
        let x = Tensor::new(vec![1, 1, 1, 1], vec![5.0]).unwrap();
        let y = conv_bn_forward(&x, &layer).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn single_pixel_evaluation() {
        let layer = conv_1x1(2.0, 1.0, Activation::Relu);
        let x = Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let y = conv_bn_forward(&x, &layer).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn activation_precedes_normalization() {
        // a(-3) = 0 under relu, then (0 - 1) / 2 * 3 + 0.5 = -1
        let mut layer = conv_1x1(1.0, 0.0, Activation::Relu);
        layer.mean = Tensor::new(vec![1], vec![1.0]).unwrap();
        layer.std = Tensor::new(vec![1], vec![2.0]).unwrap();
        layer.gamma = Tensor::new(vec![1], vec![3.0]).unwrap();
        layer.beta = Tensor::new(vec![1], vec![0.5]).unwrap();
        let x = Tensor::new(vec![1, 1, 1, 1], vec![-3.0]).unwrap();
        assert_eq!(conv_bn_forward(&x, &layer).unwrap().data(), &[-1.0]);
    }

    #[test]
    fn non_positive_std_is_rejected() {
        let mut layer = conv_1x1(1.0, 0.0, Activation::Relu);
        layer.std = Tensor::new(vec![1], vec![0.0]).unwrap();
        let x = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        assert!(matches!(
            conv_bn_forward(&x, &layer),
            Err(OtoError::InvalidParameter(_))
        ));
    }

    #[test]
    fn channel_mismatch_names_the_dimension() {
        let layer = conv_1x1(1.0, 0.0, Activation::Relu);
        let x = Tensor::<f32>::zeros(vec![1, 2, 3, 3]);
        let err = conv_bn_forward(&x, &layer).unwrap_err().to_string();
        assert!(err.contains("channel"), "{err}");
    }

    #[test]
    fn linear_identity_and_zero_row() {
        let lin = Linear::new(
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::zeros(vec![2]),
        )
        .unwrap();
        let x = Tensor::new(vec![2], vec![3.0, -1.0]).unwrap();
        assert_eq!(linear_forward(&x, &lin).unwrap().data(), &[3.0, -1.0]);

        let lin = Linear::new(
            Tensor::new(vec![2, 2], vec![0.0, 0.0, 4.0, 5.0]).unwrap(),
            Tensor::new(vec![2], vec![0.0, 1.0]).unwrap(),
        )
        .unwrap();
        for x in [[1.0f32, 2.0], [-7.0, 0.5], [1e6, -1e6]] {
            let y = linear_forward(&Tensor::new(vec![2], x.to_vec()).unwrap(), &lin).unwrap();
            assert_eq!(y.data()[0], 0.0);
        }
        let bad = Tensor::<f32>::zeros(vec![3]);
        assert!(linear_forward(&bad, &lin).is_err());
    }

    #[test]
    fn attention_identity_heads_concatenate() {
        let eye = || {
            Linear::new(
                Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                Tensor::zeros(vec![2]),
            )
            .unwrap()
        };
        let att = Attention::new(vec![eye(), eye()]).unwrap();
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert_eq!(attention_forward(&x, &att).unwrap().data(), &[1.0, 2.0, 1.0, 2.0]);

        let mut att = att;
        att.heads[0].weight.data_mut()[0..2].copy_from_slice(&[0.0, 0.0]);
        let y = attention_forward(&x, &att).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn attention_rejects_mismatched_heads() {
        let a = Linear::new(Tensor::<f32>::zeros(vec![2, 2]), Tensor::zeros(vec![2])).unwrap();
        let b = Linear::new(Tensor::<f32>::zeros(vec![2, 3]), Tensor::zeros(vec![2])).unwrap();
        assert!(Attention::new(vec![a, b]).is_err());
    }

    #[test]
    fn mse_gradient_closed_form() {
        let out = Tensor::new(vec![1, 2], vec![1.0f64, 3.0]).unwrap();
        let (l, g) =
            loss_and_grad(LossKind::MeanSquaredError, &out, &Targets::Values(vec![0.0, 1.0])).unwrap();
        assert_eq!(l, 5.0);
        assert_eq!(g.data(), &[2.0, 4.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let out = Tensor::new(vec![2, 4], vec![0.0f64; 8]).unwrap();
        let (l, g) =
            loss_and_grad(LossKind::SoftmaxCrossEntropy, &out, &Targets::Classes(vec![1, 3])).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((g.data()[1] - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!((g.data()[0] - 0.125).abs() < 1e-12);
        assert!(loss_and_grad(LossKind::SoftmaxCrossEntropy, &out, &Targets::Classes(vec![1, 4])).is_err());
    }
}
