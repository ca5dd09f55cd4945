//! Folding training-state branches into convolution weights.
//!
//! Each branch is reduced to a dense `(kernel, bias)` pair acting on the block
//! input with centered padding; the pairs are then zero-padded to a common
//! size and summed. The result is one convolution whose output equals the
//! branch sum exactly (up to rounding), border pixels included.

use rayon::prelude::*;

use crate::blocks::{Branch, ConvBn, RepBlock};
use crate::error::{check_dim, Error, Result};
use crate::tensor::{BnParams, ConvSpec, Kernel, Real};

/// Folds batch norm into a bias-free kernel.
pub fn fuse_conv_bn<T: Real>(weight: &Kernel<T>, bn: &BnParams<T>) -> Result<(Kernel<T>, Vec<T>)> {
    let zero = vec![T::zero(); weight.out_channels()];
    fold_bn(weight, &zero, bn)
}

/// Folds batch norm into a kernel that already has a bias:
/// `w' = w·γ/σ`, `b' = (b − μ)·γ/σ + β`.
pub fn fold_bn<T: Real>(
    weight: &Kernel<T>,
    bias: &[T],
    bn: &BnParams<T>,
) -> Result<(Kernel<T>, Vec<T>)> {
    bn.validate()?;
    check_dim(
        "fuse_conv_bn",
        "out channel",
        weight.out_channels(),
        bn.channels(),
    )?;
    check_dim(
        "fuse_conv_bn bias",
        "out channel",
        weight.out_channels(),
        bias.len(),
    )?;
    let mut fused = weight.clone();
    let mut fused_bias = Vec::with_capacity(bias.len());
    for (o, &b) in bias.iter().enumerate() {
        let scale = bn.scale(o);
        for w in fused.filter_mut(o) {
            *w = *w * scale;
        }
        fused_bias.push((b - bn.mean[o]) * scale + bn.beta[o]);
    }
    Ok((fused, fused_bias))
}

/// Embeds a kernel, centered, in a larger zero kernel.
pub fn pad_kernel<T: Real>(weight: &Kernel<T>, target: (usize, usize)) -> Result<Kernel<T>> {
    let (kh, kw) = weight.size();
    for (axis, k, t) in [("height", kh, target.0), ("width", kw, target.1)] {
        if t < k || (t - k) % 2 != 0 {
            return Err(Error::invalid(format!(
                "cannot center a {kh}×{kw} kernel in {}×{} ({axis} parity or size mismatch)",
                target.0, target.1
            )));
        }
    }
    let (oh, ow) = ((target.0 - kh) / 2, (target.1 - kw) / 2);
    let mut out = Kernel::zeros(weight.out_channels(), weight.in_channels(), target);
    for o in 0..weight.out_channels() {
        for i in 0..weight.in_channels() {
            for u in 0..kh {
                for v in 0..kw {
                    *out.at_mut(o, i, u + oh, v + ow) = weight.at(o, i, u, v);
                }
            }
        }
    }
    Ok(out)
}

/// Expands a dilated kernel into the dense kernel covering the same extent.
pub fn dilate_to_dense<T: Real>(weight: &Kernel<T>, dilation: (usize, usize)) -> Kernel<T> {
    let (kh, kw) = weight.size();
    let (dh, dw) = (dilation.0.max(1), dilation.1.max(1));
    let size = (1 + (kh - 1) * dh, 1 + (kw - 1) * dw);
    let mut out = Kernel::zeros(weight.out_channels(), weight.in_channels(), size);
    for o in 0..weight.out_channels() {
        for i in 0..weight.in_channels() {
            for u in 0..kh {
                for v in 0..kw {
                    *out.at_mut(o, i, u * dh, v * dw) = weight.at(o, i, u, v);
                }
            }
        }
    }
    out
}

/// Delta kernel: `w[c][c][center] = 1`, zero elsewhere.
pub fn identity_to_conv<T: Real>(channels: usize, k: (usize, usize)) -> Result<Kernel<T>> {
    if k.0.is_multiple_of(2) || k.1.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "identity kernel needs odd size, got {}×{}",
            k.0, k.1
        )));
    }
    let (cu, cv) = (k.0 / 2, k.1 / 2);
    Ok(Kernel::from_fn(channels, channels, k, |o, i, u, v| {
        if o == i && u == cu && v == cv {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// Kernel reproducing `k` average pooling: `1/(kh·kw)` on each channel's own
/// slice, zero across channels.
pub fn avgpool_to_conv<T: Real>(channels: usize, k: (usize, usize)) -> Kernel<T> {
    let inv = T::one() / T::of((k.0 * k.1) as f64);
    Kernel::from_fn(
        channels,
        channels,
        k,
        |o, i, _, _| if o == i { inv } else { T::zero() },
    )
}

/// Fuses a 1×1 conv `(w1, b1)` followed by a k×k conv `(w2, b2)`.
///
/// `w'[o][i] = Σ_m w2[o][m] · w1[m][i]` and
/// `b'[o] = b2[o] + Σ_m b1[m] · Σ_uv w2[o][m][u][v]`. Exact at the border only
/// if the second conv padded its input with `b1` (bias-aware padding).
pub fn fuse_sequential<T: Real>(
    first: (&Kernel<T>, &[T]),
    second: (&Kernel<T>, &[T]),
) -> Result<(Kernel<T>, Vec<T>)> {
    let (w1, b1) = first;
    let (w2, b2) = second;
    if w1.size() != (1, 1) {
        return Err(Error::invalid(format!(
            "sequential fusion needs a 1×1 first kernel, got {:?}",
            w1.size()
        )));
    }
    check_dim(
        "fuse_sequential",
        "channel",
        w1.out_channels(),
        w2.in_channels(),
    )?;
    check_dim(
        "fuse_sequential first bias",
        "channel",
        w1.out_channels(),
        b1.len(),
    )?;
    check_dim(
        "fuse_sequential second bias",
        "channel",
        w2.out_channels(),
        b2.len(),
    )?;
    let (kh, kw) = w2.size();
    let (mid, cin, taps) = (w1.out_channels(), w1.in_channels(), kh * kw);
    let mut weight = Kernel::zeros(w2.out_channels(), cin, (kh, kw));
    // For each output channel: w'[o][i][·] = Σ_m w1[m][i] · w2[o][m][·],
    // accumulated in ascending m.
    weight
        .data_mut()
        .par_chunks_mut(cin * taps)
        .enumerate()
        .for_each(|(o, out)| {
            let filter = w2.filter(o);
            for m in 0..mid {
                let row = &filter[m * taps..(m + 1) * taps];
                if row.iter().all(|&x| x == T::zero()) {
                    continue;
                }
                let scales = w1.filter(m);
                for (i, dst) in out.chunks_exact_mut(taps).enumerate() {
                    let a = scales[i];
                    for (d, &x) in dst.iter_mut().zip(row) {
                        *d = *d + x * a;
                    }
                }
            }
        });
    let bias = (0..w2.out_channels())
        .map(|o| {
            let mut acc = b2[o];
            for (m, &b) in b1.iter().enumerate() {
                for u in 0..kh {
                    for v in 0..kw {
                        acc = acc + b * w2.at(o, m, u, v);
                    }
                }
            }
            acc
        })
        .collect();
    Ok((weight, bias))
}

/// Sums branch kernels after centering each in `target`.
pub fn merge_parallel<T: Real>(
    branches: &[(Kernel<T>, Vec<T>)],
    target: (usize, usize),
) -> Result<(Kernel<T>, Vec<T>)> {
    let (first, _) = branches
        .first()
        .ok_or_else(|| Error::invalid("merge_parallel needs at least one branch"))?;
    let (co, ci) = (first.out_channels(), first.in_channels());
    let mut weight = Kernel::zeros(co, ci, target);
    let mut bias = vec![T::zero(); co];
    for (w, b) in branches {
        check_dim("merge_parallel", "out channel", co, w.out_channels())?;
        check_dim("merge_parallel", "in channel", ci, w.in_channels())?;
        check_dim("merge_parallel bias", "out channel", co, b.len())?;
        let padded = pad_kernel(w, target)?;
        for (acc, &x) in weight.data_mut().iter_mut().zip(padded.data()) {
            *acc = *acc + x;
        }
        for (acc, &x) in bias.iter_mut().zip(b) {
            *acc = *acc + x;
        }
    }
    Ok((weight, bias))
}

fn fuse_unit<T: Real>(unit: &ConvBn<T>) -> Result<(Kernel<T>, Vec<T>)> {
    let dense = dilate_to_dense(&unit.conv.weight, unit.conv.dilation);
    fuse_conv_bn(&dense, &unit.bn)
}

/// Reduces one branch to a dense kernel and bias over the block input.
pub fn branch_to_conv<T: Real>(branch: &Branch<T>) -> Result<(Kernel<T>, Vec<T>)> {
    match branch {
        Branch::ConvBn(unit) => fuse_unit(unit),
        Branch::Sequence(stages) => {
            let (first, rest) = stages
                .split_first()
                .ok_or_else(|| Error::invalid("empty sequence branch"))?;
            let mut acc = fuse_unit(first)?;
            for stage in rest {
                let next = fuse_unit(stage)?;
                acc = fuse_sequential((&acc.0, &acc.1), (&next.0, &next.1))?;
            }
            Ok(acc)
        }
        Branch::AvgPoolBn {
            pre, kernel, bn, ..
        } => {
            let pool = avgpool_to_conv(bn.channels(), *kernel);
            let zero = vec![T::zero(); bn.channels()];
            let (w, b) = match pre {
                Some(unit) => {
                    let p = fuse_unit(unit)?;
                    fuse_sequential((&p.0, &p.1), (&pool, &zero))?
                }
                None => (pool, zero),
            };
            fold_bn(&w, &b, bn)
        }
        Branch::IdentityBn(bn) => fuse_conv_bn(&identity_to_conv(bn.channels(), (1, 1))?, bn),
    }
}

/// Merges every branch of `block` into one convolution. The kernel size is
/// the largest branch extent on each axis.
pub fn fuse_block<T: Real>(block: &RepBlock<T>) -> Result<ConvSpec<T>> {
    let target = block.branches().iter().fold((1, 1), |acc, b| {
        let e = b.extent();
        (acc.0.max(e.0), acc.1.max(e.1))
    });
    let reduced = block
        .branches()
        .iter()
        .map(branch_to_conv)
        .collect::<Result<Vec<_>>>()?;
    let (weight, bias) = merge_parallel(&reduced, target)?;
    Ok(ConvSpec::new(weight)
        .with_stride(block.stride())
        .with_padding(((target.0 - 1) / 2, (target.1 - 1) / 2))
        .with_bias(bias))
}

/// Analytic floating-point operation count for one forward pass.
///
/// Convolutions cost `2·N·Cout·Hout·Wout·Cin·kh·kw` (taps of the stored kernel,
/// not its dilated extent); each batch norm, bias add and branch addition
/// costs one op per output element; average pooling costs `kh·kw` per output
/// element. The trailing ReLU is shared by both block states and not counted.
pub trait CountFlops {
    fn count_flops(&self, input_shape: [usize; 4]) -> Result<u64>;
}

impl<T: Real> CountFlops for ConvSpec<T> {
    fn count_flops(&self, input_shape: [usize; 4]) -> Result<u64> {
        let [n, c, h, w] = input_shape;
        check_dim("count_flops", "channel", self.in_channels(), c)?;
        let (ho, wo) = self.output_hw(h, w)?;
        let (kh, kw) = self.kernel();
        let outputs = (n * self.out_channels() * ho * wo) as u64;
        let macs = 2 * outputs * (c * kh * kw) as u64;
        Ok(macs + if self.bias.is_some() { outputs } else { 0 })
    }
}

fn unit_flops<T: Real>(unit: &ConvBn<T>, shape: [usize; 4]) -> Result<(u64, [usize; 4])> {
    let conv = unit.conv.count_flops(shape)?;
    let (ho, wo) = unit.conv.output_hw(shape[2], shape[3])?;
    let out = [shape[0], unit.conv.out_channels(), ho, wo];
    Ok((conv + out.iter().product::<usize>() as u64, out))
}

impl<T: Real> CountFlops for Branch<T> {
    fn count_flops(&self, shape: [usize; 4]) -> Result<u64> {
        Ok(match self {
            Branch::ConvBn(unit) => unit_flops(unit, shape)?.0,
            Branch::Sequence(stages) => {
                let mut total = 0;
                let mut cur = shape;
                for stage in stages {
                    let (f, next) = unit_flops(stage, cur)?;
                    total += f;
                    cur = next;
                }
                total
            }
            Branch::AvgPoolBn {
                pre,
                kernel,
                stride,
                padding,
                bn,
            } => {
                let (pre_flops, cur) = match pre {
                    Some(unit) => unit_flops(unit, shape)?,
                    None => (0, shape),
                };
                let ho = (cur[2] + 2 * padding.0 - kernel.0) / stride.0 + 1;
                let wo = (cur[3] + 2 * padding.1 - kernel.1) / stride.1 + 1;
                let outputs = (cur[0] * bn.channels() * ho * wo) as u64;
                pre_flops + outputs * (kernel.0 * kernel.1) as u64 + outputs
            }
            Branch::IdentityBn(_) => shape.iter().product::<usize>() as u64,
        })
    }
}

impl<T: Real> CountFlops for RepBlock<T> {
    fn count_flops(&self, shape: [usize; 4]) -> Result<u64> {
        check_dim("count_flops", "channel", self.in_channels(), shape[1])?;
        let (ho, wo) = self.output_hw(shape[2], shape[3]);
        let outputs = (shape[0] * self.out_channels() * ho * wo) as u64;
        let mut total = outputs * (self.branches().len() as u64 - 1);
        for branch in self.branches() {
            total += branch.count_flops(shape)?;
        }
        Ok(total)
    }
}

pub fn count_flops(subject: &impl CountFlops, input_shape: [usize; 4]) -> Result<u64> {
    subject.count_flops(input_shape)
}
