//! Dense NCHW tensors and the reference kernels everything else is checked
//! against: direct convolution, batch norm, ReLU, average pooling and
//! element-wise addition.
//!
//! Convolution is cross-correlation. Every output element accumulates its taps
//! in a fixed order (input channel innermost, then kernel row, then kernel
//! column outermost) and adds the bias last, so results are reproducible run
//! to run regardless of how the work is split across threads. Taps whose
//! weight is exactly zero are skipped; a zero-padded or dilation-expanded
//! kernel therefore performs the same floating-point operations, in the same
//! order, as the kernel it was expanded from.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Floating-point element type a pipeline runs in.
pub trait Real: Float + Sum + Default + Debug + Display + LowerExp + Send + Sync + 'static {
    const PRECISION: Precision;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const PRECISION: Precision = Precision::Single;

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::Double;

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    /// Default equivalence tolerance (relative L∞) between training-state and
    /// fused outputs.
    pub fn default_tolerance(self) -> f64 {
        match self {
            Precision::Single => 1e-4,
            Precision::Double => 1e-9,
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::Single => "single",
            Precision::Double => "double",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(Error::invalid(format!(
                "unknown precision `{other}` (expected single or double)"
            ))),
        }
    }
}

/// A dense `[batch, channel, freq, time]` array stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Wraps `data`, rejecting length mismatches and non-finite values.
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        check_dim(
            "tensor",
            "element count",
            shape.iter().product(),
            data.len(),
        )?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("tensor contains non-finite values"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let [_, cs, hs, ws] = self.shape;
        self.data[((n * cs + c) * hs + h) * ws + w]
    }

    /// One `[h, w]` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// One sample as a `[1, C, H, W]` tensor.
    pub fn sample(&self, n: usize) -> Tensor<T> {
        let [_, c, h, w] = self.shape;
        let len = c * h * w;
        Tensor {
            shape: [1, c, h, w],
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Convolution weights laid out `[out_channels][in_channels][kh][kw]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel<T> {
    out_channels: usize,
    in_channels: usize,
    size: (usize, usize),
    data: Vec<T>,
}

impl<T: Real> Kernel<T> {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        size: (usize, usize),
        data: Vec<T>,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || size.0 == 0 || size.1 == 0 {
            return Err(Error::invalid("kernel dimensions must be positive"));
        }
        check_dim(
            "kernel",
            "element count",
            out_channels * in_channels * size.0 * size.1,
            data.len(),
        )?;
        Ok(Self {
            out_channels,
            in_channels,
            size,
            data,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, size: (usize, usize)) -> Self {
        Self {
            out_channels,
            in_channels,
            size,
            data: vec![T::zero(); out_channels * in_channels * size.0 * size.1],
        }
    }

    pub fn from_fn(
        out_channels: usize,
        in_channels: usize,
        size: (usize, usize),
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        let mut k = Self::zeros(out_channels, in_channels, size);
        for o in 0..out_channels {
            for i in 0..in_channels {
                for u in 0..size.0 {
                    for v in 0..size.1 {
                        *k.at_mut(o, i, u, v) = f(o, i, u, v);
                    }
                }
            }
        }
        k
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// `(kh, kw)`.
    pub fn size(&self) -> (usize, usize) {
        self.size
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn offset(&self, o: usize, i: usize, u: usize, v: usize) -> usize {
        ((o * self.in_channels + i) * self.size.0 + u) * self.size.1 + v
    }

    pub fn at(&self, o: usize, i: usize, u: usize, v: usize) -> T {
        self.data[self.offset(o, i, u, v)]
    }

    pub fn at_mut(&mut self, o: usize, i: usize, u: usize, v: usize) -> &mut T {
        let idx = self.offset(o, i, u, v);
        &mut self.data[idx]
    }

    /// The `[in][kh][kw]` filter producing output channel `o`.
    pub fn filter(&self, o: usize) -> &[T] {
        let len = self.in_channels * self.size.0 * self.size.1;
        &self.data[o * len..(o + 1) * len]
    }

    pub fn filter_mut(&mut self, o: usize) -> &mut [T] {
        let len = self.in_channels * self.size.0 * self.size.1;
        &mut self.data[o * len..(o + 1) * len]
    }
}

/// A convolution layer: weights, optional bias and geometry.
///
/// `pad_value` holds one fill constant per input channel; ordinary
/// convolutions pad with zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec<T> {
    pub weight: Kernel<T>,
    pub bias: Option<Vec<T>>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub pad_value: Vec<T>,
}

impl<T: Real> ConvSpec<T> {
    pub fn new(weight: Kernel<T>) -> Self {
        let pad_value = vec![T::zero(); weight.in_channels()];
        Self {
            weight,
            bias: None,
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            pad_value,
        }
    }

    pub fn with_stride(mut self, stride: (usize, usize)) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: (usize, usize)) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_dilation(mut self, dilation: (usize, usize)) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_bias(mut self, bias: Vec<T>) -> Self {
        self.bias = Some(bias);
        self
    }

    pub fn with_pad_value(mut self, pad_value: Vec<T>) -> Self {
        self.pad_value = pad_value;
        self
    }

    pub fn in_channels(&self) -> usize {
        self.weight.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.out_channels()
    }

    pub fn kernel(&self) -> (usize, usize) {
        self.weight.size()
    }

    /// Extent covered by the kernel once dilation is applied.
    pub fn extent(&self) -> (usize, usize) {
        let (kh, kw) = self.kernel();
        (
            1 + (kh - 1) * self.dilation.0,
            1 + (kw - 1) * self.dilation.1,
        )
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let (sh, sw) = self.stride;
        let (dh, dw) = self.dilation;
        if sh == 0 || sw == 0 {
            return Err(Error::invalid("conv stride must be positive"));
        }
        if dh == 0 || dw == 0 {
            return Err(Error::invalid("conv dilation must be positive"));
        }
        if let Some(bias) = &self.bias {
            check_dim("conv bias", "out channel", self.out_channels(), bias.len())?;
        }
        check_dim(
            "conv pad_value",
            "in channel",
            self.in_channels(),
            self.pad_value.len(),
        )
    }

    /// Output `(h, w)` for an input of spatial size `(h, w)`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (eh, ew) = self.extent();
        Ok((
            out_extent("conv2d", "height", h, eh, self.stride.0, self.padding.0)?,
            out_extent("conv2d", "width", w, ew, self.stride.1, self.padding.1)?,
        ))
    }
}

/// Inference-mode batch norm statistics for `channels` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub epsilon: T,
}

pub const DEFAULT_BN_EPSILON: f64 = 1e-5;

impl<T: Real> BnParams<T> {
    pub fn new(gamma: Vec<T>, beta: Vec<T>, mean: Vec<T>, var: Vec<T>, epsilon: T) -> Result<Self> {
        let bn = Self {
            gamma,
            beta,
            mean,
            var,
            epsilon,
        };
        bn.validate()?;
        Ok(bn)
    }

    /// gamma 1, beta 0, mean 0, var 1 with the default epsilon.
    pub fn standard(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            epsilon: T::of(DEFAULT_BN_EPSILON),
        }
    }

    /// Like [`BnParams::standard`] but with epsilon 0, i.e. an exact identity.
    pub fn identity(channels: usize) -> Self {
        Self {
            epsilon: T::zero(),
            ..Self::standard(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        check_dim("batch norm beta", "channel", c, self.beta.len())?;
        check_dim("batch norm mean", "channel", c, self.mean.len())?;
        check_dim("batch norm var", "channel", c, self.var.len())?;
        if self.epsilon < T::zero() || !self.epsilon.is_finite() {
            return Err(Error::invalid("batch norm epsilon must be finite and >= 0"));
        }
        for (ch, &v) in self.var.iter().enumerate() {
            if !(v >= T::zero()) || !(v + self.epsilon > T::zero()) {
                return Err(Error::invalid(format!(
                    "batch norm channel {ch}: var + epsilon must be positive"
                )));
            }
        }
        Ok(())
    }

    /// `sqrt(var + epsilon)` for channel `c`.
    pub fn sigma(&self, c: usize) -> T {
        (self.var[c] + self.epsilon).sqrt()
    }

    /// `gamma / sigma` for channel `c`.
    pub fn scale(&self, c: usize) -> T {
        self.gamma[c] / self.sigma(c)
    }

    /// Normalizes a single value on channel `c`.
    pub fn apply(&self, c: usize, x: T) -> T {
        (x - self.mean[c]) * self.scale(c) + self.beta[c]
    }
}

pub(crate) fn out_extent(
    context: &'static str,
    axis: &'static str,
    input: usize,
    extent: usize,
    stride: usize,
    pad: usize,
) -> Result<usize> {
    let padded = input + 2 * pad;
    if input == 0 || extent > padded {
        return Err(Error::Geometry {
            context,
            axis,
            extent,
            padded,
        });
    }
    Ok((padded - extent) / stride + 1)
}

/// Copies sample `n` into a `[C][H + 2ph][W + 2pw]` buffer whose border is
/// filled with the per-channel `pad_value`.
fn pad_sample<T: Real>(
    input: &Tensor<T>,
    n: usize,
    pad: (usize, usize),
    pad_value: &[T],
) -> Vec<T> {
    let [_, c, h, w] = input.shape();
    let (hp, wp) = (h + 2 * pad.0, w + 2 * pad.1);
    let mut buf = Vec::with_capacity(c * hp * wp);
    for (ch, &fill) in pad_value.iter().enumerate().take(c) {
        let src = input.plane(n, ch);
        buf.extend(std::iter::repeat_n(fill, pad.0 * wp));
        for row in src.chunks_exact(w) {
            buf.extend(std::iter::repeat_n(fill, pad.1));
            buf.extend_from_slice(row);
            buf.extend(std::iter::repeat_n(fill, pad.1));
        }
        buf.extend(std::iter::repeat_n(fill, pad.0 * wp));
    }
    buf
}

/// `dst[y][x] += weight * src[y*sh + u][x*sw + v]` over the output plane.
#[inline]
#[allow(clippy::too_many_arguments)]
fn accumulate_tap<T: Real>(
    dst: &mut [T],
    src: &[T],
    src_width: usize,
    out_w: usize,
    stride: (usize, usize),
    offset: (usize, usize),
    weight: T,
) {
    for (y, drow) in dst.chunks_exact_mut(out_w).enumerate() {
        let start = (y * stride.0 + offset.0) * src_width + offset.1;
        let srow = &src[start..];
        if stride.1 == 1 {
            for (d, &s) in drow.iter_mut().zip(&srow[..out_w]) {
                *d = *d + weight * s;
            }
        } else {
            for (x, d) in drow.iter_mut().enumerate() {
                *d = *d + weight * srow[x * stride.1];
            }
        }
    }
}

/// Direct 2-D convolution honoring `spec.pad_value`.
pub fn conv2d<T: Real>(input: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    conv2d_with_pad(input, spec, &spec.pad_value)
}

/// [`conv2d`] with the padding fill supplied separately from the spec.
pub(crate) fn conv2d_with_pad<T: Real>(
    input: &Tensor<T>,
    spec: &ConvSpec<T>,
    pad_value: &[T],
) -> Result<Tensor<T>> {
    spec.validate()?;
    let [n, c, h, w] = input.shape();
    check_dim("conv2d input", "channel", spec.in_channels(), c)?;
    check_dim("conv2d pad_value", "channel", c, pad_value.len())?;
    let (ho, wo) = spec.output_hw(h, w)?;
    let (kh, kw) = spec.kernel();
    let (dh, dw) = spec.dilation;
    let co = spec.out_channels();
    let wp = w + 2 * spec.padding.1;
    let chan_len = (h + 2 * spec.padding.0) * wp;

    let padded: Vec<Vec<T>> = (0..n)
        .map(|b| pad_sample(input, b, spec.padding, pad_value))
        .collect();

    let plane = ho * wo;
    let mut out = vec![T::zero(); n * co * plane];
    out.par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (b, o) = (idx / co, idx % co);
            let src = &padded[b];
            for v in 0..kw {
                for u in 0..kh {
                    for i in 0..c {
                        let wt = spec.weight.at(o, i, u, v);
                        if wt == T::zero() {
                            continue;
                        }
                        let chan = &src[i * chan_len..(i + 1) * chan_len];
                        accumulate_tap(dst, chan, wp, wo, spec.stride, (u * dh, v * dw), wt);
                    }
                }
            }
            if let Some(bias) = &spec.bias {
                for d in dst.iter_mut() {
                    *d = *d + bias[o];
                }
            }
        });
    Ok(Tensor {
        shape: [n, co, ho, wo],
        data: out,
    })
}

pub fn batchnorm_forward<T: Real>(input: &Tensor<T>, bn: &BnParams<T>) -> Result<Tensor<T>> {
    bn.validate()?;
    check_dim(
        "batchnorm input",
        "channel",
        bn.channels(),
        input.channels(),
    )?;
    let [n, c, h, w] = input.shape();
    let hw = h * w;
    let mut data = input.data.clone();
    for (idx, plane) in data.chunks_exact_mut(hw.max(1)).enumerate().take(n * c) {
        let ch = idx % c;
        let (mean, scale, beta) = (bn.mean[ch], bn.scale(ch), bn.beta[ch]);
        for x in plane {
            *x = (*x - mean) * scale + beta;
        }
    }
    Ok(Tensor {
        shape: input.shape,
        data,
    })
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| x.max(T::zero()))
}

/// Average pooling over `k` windows. Padded positions count as zeros and are
/// included in the `kh·kw` divisor.
pub fn avgpool2d<T: Real>(
    input: &Tensor<T>,
    k: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor<T>> {
    let zeros = vec![T::zero(); input.channels()];
    avgpool2d_with_pad(input, k, stride, padding, &zeros)
}

/// [`avgpool2d`] with a per-channel padding fill. The window mean is computed
/// as a sum of `x / (kh·kw)` terms in the same tap order as [`conv2d`].
pub(crate) fn avgpool2d_with_pad<T: Real>(
    input: &Tensor<T>,
    k: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
    pad_value: &[T],
) -> Result<Tensor<T>> {
    if k.0 == 0 || k.1 == 0 || stride.0 == 0 || stride.1 == 0 {
        return Err(Error::invalid("avgpool window and stride must be positive"));
    }
    let [n, c, h, w] = input.shape();
    check_dim("avgpool pad_value", "channel", c, pad_value.len())?;
    let ho = out_extent("avgpool2d", "height", h, k.0, stride.0, padding.0)?;
    let wo = out_extent("avgpool2d", "width", w, k.1, stride.1, padding.1)?;
    let wp = w + 2 * padding.1;
    let chan_len = (h + 2 * padding.0) * wp;
    let inv = T::one() / T::of((k.0 * k.1) as f64);

    let padded: Vec<Vec<T>> = (0..n)
        .map(|b| pad_sample(input, b, padding, pad_value))
        .collect();
    let plane = ho * wo;
    let mut out = vec![T::zero(); n * c * plane];
    out.par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (b, ch) = (idx / c, idx % c);
            let chan = &padded[b][ch * chan_len..(ch + 1) * chan_len];
            for v in 0..k.1 {
                for u in 0..k.0 {
                    accumulate_tap(dst, chan, wp, wo, stride, (u, v), inv);
                }
            }
        });
    Ok(Tensor {
        shape: [n, c, ho, wo],
        data: out,
    })
}

/// Element-wise sum, accumulated in list order.
pub fn add<T: Real>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (first, rest) = inputs
        .split_first()
        .ok_or_else(|| Error::invalid("add needs at least one tensor"))?;
    let mut acc = (*first).clone();
    for t in rest {
        for (axis, (&a, &b)) in ["batch", "channel", "height", "width"]
            .iter()
            .zip(acc.shape.iter().zip(t.shape.iter()))
        {
            check_dim("add", axis, a, b)?;
        }
        for (a, &b) in acc.data.iter_mut().zip(&t.data) {
            *a = *a + b;
        }
    }
    Ok(acc)
}

/// `max |reference − candidate| / max |reference|`, falling back to the
/// absolute error when the reference is identically zero.
pub fn max_relative_error<T: Real>(reference: &Tensor<T>, candidate: &Tensor<T>) -> f64 {
    relative_linf(reference.data(), candidate.data())
}

pub fn relative_linf<T: Real>(reference: &[T], candidate: &[T]) -> f64 {
    assert_eq!(reference.len(), candidate.len(), "length mismatch");
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&r, &c) in reference.iter().zip(candidate) {
        diff = diff.max((r.as_f64() - c.as_f64()).abs());
        scale = scale.max(r.as_f64().abs());
    }
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}
