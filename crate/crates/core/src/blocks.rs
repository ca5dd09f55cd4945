//! Training-state representation of re-parameterizable blocks.
//!
//! A [`RepBlock`] is a set of parallel branches that all map the block input
//! to the same output geometry; the branch outputs are summed and passed
//! through ReLU. Every branch is kept centered (odd effective extent, padding
//! `(extent − 1) / 2`, block stride) so that the branches line up pixel for
//! pixel and can later be merged into one kernel.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::tensor::{
    add, avgpool2d_with_pad, batchnorm_forward, conv2d, conv2d_with_pad, relu, BnParams, ConvSpec,
    Kernel, Real, Tensor, DEFAULT_BN_EPSILON,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockVariant {
    /// 3×3 ∥ 1×1 ∥ identity
    RepVgg,
    /// 3×3 ∥ 3×3 ∥ identity
    VarA,
    /// 3×3 ∥ 1×3 ∥ identity
    VarB,
    /// 3×3 ∥ 3×1 ∥ identity
    VarC,
    /// 3×3 ∥ (1×1 → 3×3) ∥ identity
    VarD,
    /// 3×3 ∥ (1×1 → 3×3 avg-pool) ∥ identity
    VarE,
    /// 3×3 ∥ 3×3 dilation 2 ∥ identity
    VarF,
    /// Same branch set as [`BlockVariant::VarD`].
    Rsba,
    /// Same branch set as [`BlockVariant::VarF`].
    Rsbb,
}

impl BlockVariant {
    pub const ALL: [BlockVariant; 9] = [
        BlockVariant::RepVgg,
        BlockVariant::VarA,
        BlockVariant::VarB,
        BlockVariant::VarC,
        BlockVariant::VarD,
        BlockVariant::VarE,
        BlockVariant::VarF,
        BlockVariant::Rsba,
        BlockVariant::Rsbb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockVariant::RepVgg => "repvgg",
            BlockVariant::VarA => "var_a",
            BlockVariant::VarB => "var_b",
            BlockVariant::VarC => "var_c",
            BlockVariant::VarD => "var_d",
            BlockVariant::VarE => "var_e",
            BlockVariant::VarF => "var_f",
            BlockVariant::Rsba => "rsba",
            BlockVariant::Rsbb => "rsbb",
        }
    }

    /// Kernel size of the fused convolution this variant reduces to.
    pub fn fused_kernel(self) -> (usize, usize) {
        match self {
            BlockVariant::VarF | BlockVariant::Rsbb => (5, 5),
            _ => (3, 3),
        }
    }
}

impl fmt::Display for BlockVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let wanted = s.to_ascii_lowercase().replace('-', "_");
        BlockVariant::ALL
            .into_iter()
            .find(|v| v.name() == wanted)
            .ok_or_else(|| {
                let names: Vec<_> = BlockVariant::ALL.iter().map(|v| v.name()).collect();
                Error::invalid(format!(
                    "unknown block variant `{s}`; valid variants: {}",
                    names.join(", ")
                ))
            })
    }
}

/// How fresh block weights are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitPolicy {
    /// Conv weights uniform in ±1/sqrt(fan_in); BN gamma 1, beta 0, mean 0, var 1.
    #[default]
    Standard,
    /// Same conv weights, but BN statistics drawn at random as well.
    RandomStats,
}

impl FromStr for InitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(InitPolicy::Standard),
            "random-bn" | "random_bn" => Ok(InitPolicy::RandomStats),
            other => Err(Error::invalid(format!(
                "unknown init policy `{other}` (expected standard or random-bn)"
            ))),
        }
    }
}

impl InitPolicy {
    pub fn name(self) -> &'static str {
        match self {
            InitPolicy::Standard => "standard",
            InitPolicy::RandomStats => "random-bn",
        }
    }

    pub fn kernel<T: Real, R: Rng + ?Sized>(
        self,
        rng: &mut R,
        out_ch: usize,
        in_ch: usize,
        size: (usize, usize),
    ) -> Kernel<T> {
        let bound = 1.0 / ((in_ch * size.0 * size.1) as f64).sqrt();
        Kernel::from_fn(out_ch, in_ch, size, |_, _, _, _| {
            T::of(rng.random_range(-bound..bound))
        })
    }

    pub fn bn<T: Real, R: Rng + ?Sized>(self, rng: &mut R, channels: usize) -> BnParams<T> {
        match self {
            InitPolicy::Standard => BnParams::standard(channels),
            InitPolicy::RandomStats => {
                let mut draw = |lo: f64, hi: f64| -> Vec<T> {
                    (0..channels)
                        .map(|_| T::of(rng.random_range(lo..hi)))
                        .collect()
                };
                let gamma = draw(0.5, 1.5);
                let beta = draw(-0.5, 0.5);
                let mean = draw(-0.5, 0.5);
                let var = draw(0.5, 2.0);
                BnParams {
                    gamma,
                    beta,
                    mean,
                    var,
                    epsilon: T::of(DEFAULT_BN_EPSILON),
                }
            }
        }
    }
}

/// A bias-free convolution followed by batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn<T> {
    pub conv: ConvSpec<T>,
    pub bn: BnParams<T>,
}

impl<T: Real> ConvBn<T> {
    pub fn new(conv: ConvSpec<T>, bn: BnParams<T>) -> Result<Self> {
        let unit = Self { conv, bn };
        unit.validate()?;
        Ok(unit)
    }

    fn validate(&self) -> Result<()> {
        self.conv.validate()?;
        self.bn.validate()?;
        if self.conv.bias.is_some() {
            return Err(Error::invalid(
                "branch convolutions carry no bias; BN provides it",
            ));
        }
        if self.conv.pad_value.iter().any(|&v| v != T::zero()) {
            return Err(Error::invalid(
                "branch convolutions must declare zero pad_value",
            ));
        }
        check_dim(
            "conv-bn",
            "channel",
            self.conv.out_channels(),
            self.bn.channels(),
        )
    }

    fn forward(&self, input: &Tensor<T>, pad_value: &[T]) -> Result<Tensor<T>> {
        let y = conv2d_with_pad(input, &self.conv, pad_value)?;
        batchnorm_forward(&y, &self.bn)
    }

    /// Output of this unit when every input pixel on channel `i` equals
    /// `input[i]` over the whole receptive field.
    pub fn constant_response(&self, input: &[T]) -> Vec<T> {
        (0..self.conv.out_channels())
            .map(|o| {
                let (kh, kw) = self.conv.kernel();
                let filter = self.conv.weight.filter(o);
                let mut acc = T::zero();
                for (i, &c) in input.iter().enumerate() {
                    let taps = &filter[i * kh * kw..(i + 1) * kh * kw];
                    acc = acc + c * taps.iter().copied().sum::<T>();
                }
                self.bn.apply(o, acc)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + 4 * self.bn.channels()
    }
}

/// One parallel path of a [`RepBlock`].
#[derive(Clone, Debug, PartialEq)]
pub enum Branch<T> {
    ConvBn(ConvBn<T>),
    /// Chained conv-BN units. All but the last stage are 1×1, stride 1; each
    /// stage pads its input with the constant the preceding stages produce on
    /// a zero input (bias-aware padding), which is what a fused conv sees at
    /// the image border.
    Sequence(Vec<ConvBn<T>>),
    /// Optional 1×1 conv-BN, then `kernel` average pooling, then BN. The pool
    /// pads with the 1×1 stage's zero-input response (zeros without it) and
    /// divides by the full window size.
    AvgPoolBn {
        pre: Option<ConvBn<T>>,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        bn: BnParams<T>,
    },
    IdentityBn(BnParams<T>),
}

impl<T: Real> Branch<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Branch::ConvBn(_) => "conv-bn",
            Branch::Sequence(_) => "sequence",
            Branch::AvgPoolBn { .. } => "avgpool-bn",
            Branch::IdentityBn(_) => "identity-bn",
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Branch::IdentityBn(_))
    }

    fn in_channels(&self) -> usize {
        match self {
            Branch::ConvBn(u) => u.conv.in_channels(),
            Branch::Sequence(stages) => stages[0].conv.in_channels(),
            Branch::AvgPoolBn { pre: Some(p), .. } => p.conv.in_channels(),
            Branch::AvgPoolBn { pre: None, bn, .. } => bn.channels(),
            Branch::IdentityBn(bn) => bn.channels(),
        }
    }

    fn out_channels(&self) -> usize {
        match self {
            Branch::ConvBn(u) => u.bn.channels(),
            Branch::Sequence(stages) => stages[stages.len() - 1].bn.channels(),
            Branch::AvgPoolBn { bn, .. } | Branch::IdentityBn(bn) => bn.channels(),
        }
    }

    fn geometry(&self) -> ((usize, usize), (usize, usize), (usize, usize)) {
        match self {
            Branch::ConvBn(u) => (u.conv.extent(), u.conv.padding, u.conv.stride),
            Branch::Sequence(stages) => {
                let last = &stages[stages.len() - 1].conv;
                (last.extent(), last.padding, last.stride)
            }
            Branch::AvgPoolBn {
                kernel,
                stride,
                padding,
                ..
            } => (*kernel, *padding, *stride),
            Branch::IdentityBn(_) => ((1, 1), (0, 0), (1, 1)),
        }
    }

    /// Effective (dilated) kernel extent of the branch.
    pub fn extent(&self) -> (usize, usize) {
        self.geometry().0
    }

    fn validate(&self) -> Result<()> {
        match self {
            Branch::ConvBn(u) => u.validate(),
            Branch::Sequence(stages) => {
                if stages.len() < 2 {
                    return Err(Error::invalid(
                        "a sequence branch needs at least two stages",
                    ));
                }
                for s in stages {
                    s.validate()?;
                }
                for pair in stages.windows(2) {
                    check_dim(
                        "sequence",
                        "channel",
                        pair[0].conv.out_channels(),
                        pair[1].conv.in_channels(),
                    )?;
                }
                for s in &stages[..stages.len() - 1] {
                    let c = &s.conv;
                    if c.kernel() != (1, 1) || c.stride != (1, 1) || c.padding != (0, 0) {
                        return Err(Error::invalid(
                            "sequence stages before the last must be 1×1, stride 1, no padding",
                        ));
                    }
                }
                Ok(())
            }
            Branch::AvgPoolBn {
                pre, kernel, bn, ..
            } => {
                bn.validate()?;
                if kernel.0 == 0 || kernel.1 == 0 {
                    return Err(Error::invalid("avg-pool kernel must be positive"));
                }
                match pre {
                    Some(p) => {
                        p.validate()?;
                        let c = &p.conv;
                        if c.kernel() != (1, 1) || c.stride != (1, 1) || c.padding != (0, 0) {
                            return Err(Error::invalid(
                                "avg-pool pre-stage must be 1×1, stride 1, no padding",
                            ));
                        }
                        check_dim(
                            "avg-pool branch",
                            "channel",
                            c.out_channels(),
                            bn.channels(),
                        )
                    }
                    None => Ok(()),
                }
            }
            Branch::IdentityBn(bn) => bn.validate(),
        }
    }

    /// Pre-addition output of this branch.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Branch::ConvBn(u) => u.forward(input, &u.conv.pad_value),
            Branch::Sequence(stages) => {
                let mut fill = vec![T::zero(); input.channels()];
                let mut y = input.clone();
                for stage in stages {
                    y = stage.forward(&y, &fill)?;
                    fill = stage.constant_response(&fill);
                }
                Ok(y)
            }
            Branch::AvgPoolBn {
                pre,
                kernel,
                stride,
                padding,
                bn,
            } => {
                let (pooled_in, fill) = match pre {
                    Some(p) => {
                        let zeros = vec![T::zero(); input.channels()];
                        (p.forward(input, &zeros)?, p.constant_response(&zeros))
                    }
                    None => (input.clone(), vec![T::zero(); input.channels()]),
                };
                let pooled = avgpool2d_with_pad(&pooled_in, *kernel, *stride, *padding, &fill)?;
                batchnorm_forward(&pooled, bn)
            }
            Branch::IdentityBn(bn) => batchnorm_forward(input, bn),
        }
    }

    /// Number of stored values (weights plus four BN vectors per BN).
    pub fn param_count(&self) -> usize {
        match self {
            Branch::ConvBn(u) => u.param_count(),
            Branch::Sequence(stages) => stages.iter().map(ConvBn::param_count).sum(),
            Branch::AvgPoolBn { pre, bn, .. } => {
                pre.as_ref().map_or(0, ConvBn::param_count) + 4 * bn.channels()
            }
            Branch::IdentityBn(bn) => 4 * bn.channels(),
        }
    }
}

/// Parallel branches summed, then ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct RepBlock<T> {
    in_channels: usize,
    out_channels: usize,
    stride: (usize, usize),
    branches: Vec<Branch<T>>,
}

impl<T: Real> RepBlock<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        stride: (usize, usize),
        branches: Vec<Branch<T>>,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid("block channels and stride must be positive"));
        }
        if !branches
            .iter()
            .any(|b| matches!(b, Branch::ConvBn(_) | Branch::Sequence(_)))
        {
            return Err(Error::invalid(
                "a block needs at least one conv-bn or sequence branch",
            ));
        }
        for (idx, branch) in branches.iter().enumerate() {
            branch.validate()?;
            check_dim(
                "block branch",
                "in channel",
                in_channels,
                branch.in_channels(),
            )?;
            check_dim(
                "block branch",
                "out channel",
                out_channels,
                branch.out_channels(),
            )?;
            let (extent, padding, branch_stride) = branch.geometry();
            if branch.is_identity() && (in_channels != out_channels || stride != (1, 1)) {
                return Err(Error::invalid(
                    "identity branch requires in == out channels and stride 1",
                ));
            }
            if let Branch::AvgPoolBn { pre: None, .. } = branch {
                if in_channels != out_channels {
                    return Err(Error::invalid(
                        "avg-pool branch without a 1×1 stage requires in == out channels",
                    ));
                }
            }
            if !branch.is_identity() && branch_stride != stride {
                return Err(Error::invalid(format!(
                    "branch {idx} stride {branch_stride:?} differs from block stride {stride:?}"
                )));
            }
            for (e, p) in [(extent.0, padding.0), (extent.1, padding.1)] {
                if e % 2 == 0 || p != (e - 1) / 2 {
                    return Err(Error::invalid(format!(
                        "branch {idx} ({}) is not centered: extent {extent:?}, padding {padding:?}",
                        branch.kind()
                    )));
                }
            }
        }
        Ok(Self {
            in_channels,
            out_channels,
            stride,
            branches,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn stride(&self) -> (usize, usize) {
        self.stride
    }

    pub fn branches(&self) -> &[Branch<T>] {
        &self.branches
    }

    pub fn into_branches(self) -> Vec<Branch<T>> {
        self.branches
    }

    /// Index of the main (first conv-bn) branch.
    pub fn main_branch(&self) -> Option<usize> {
        self.branches
            .iter()
            .position(|b| matches!(b, Branch::ConvBn(_)))
    }

    /// Output spatial size for an input of size `(h, w)`.
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride.0 + 1, (w - 1) / self.stride.1 + 1)
    }

    pub fn param_count(&self) -> usize {
        self.branches.iter().map(Branch::param_count).sum()
    }

    /// Each branch's output before the addition.
    pub fn branch_outputs(&self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        check_dim("block input", "channel", self.in_channels, input.channels())?;
        self.branches.iter().map(|b| b.forward(input)).collect()
    }

    /// Training-state forward: sum of branch outputs, then ReLU.
    pub fn forward_train(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let outputs = self.branch_outputs(input)?;
        let refs: Vec<&Tensor<T>> = outputs.iter().collect();
        Ok(relu(&add(&refs)?))
    }
}

/// Inference-state forward: the fused convolution, then ReLU.
pub fn forward_inference<T: Real>(conv: &ConvSpec<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(relu(&conv2d(input, conv)?))
}

/// Builds the branch set for `variant` with freshly drawn weights.
pub fn make_block<T: Real, R: Rng + ?Sized>(
    variant: BlockVariant,
    in_ch: usize,
    out_ch: usize,
    stride: (usize, usize),
    init: InitPolicy,
    rng: &mut R,
) -> Result<RepBlock<T>> {
    if in_ch == 0 || out_ch == 0 {
        return Err(Error::invalid("block channels must be positive"));
    }
    let conv_bn = |rng: &mut R,
                   cin: usize,
                   size: (usize, usize),
                   padding: (usize, usize),
                   dilation: (usize, usize),
                   stride: (usize, usize)|
     -> ConvBn<T> {
        let conv = ConvSpec::new(init.kernel(rng, out_ch, cin, size))
            .with_stride(stride)
            .with_padding(padding)
            .with_dilation(dilation);
        ConvBn {
            conv,
            bn: init.bn(rng, out_ch),
        }
    };

    let mut branches = vec![Branch::ConvBn(conv_bn(
        rng,
        in_ch,
        (3, 3),
        (1, 1),
        (1, 1),
        stride,
    ))];
    let second = match variant {
        BlockVariant::RepVgg => Branch::ConvBn(conv_bn(rng, in_ch, (1, 1), (0, 0), (1, 1), stride)),
        BlockVariant::VarA => Branch::ConvBn(conv_bn(rng, in_ch, (3, 3), (1, 1), (1, 1), stride)),
        BlockVariant::VarB => Branch::ConvBn(conv_bn(rng, in_ch, (1, 3), (0, 1), (1, 1), stride)),
        BlockVariant::VarC => Branch::ConvBn(conv_bn(rng, in_ch, (3, 1), (1, 0), (1, 1), stride)),
        BlockVariant::VarD | BlockVariant::Rsba => {
            let first = conv_bn(rng, in_ch, (1, 1), (0, 0), (1, 1), (1, 1));
            let second = conv_bn(rng, out_ch, (3, 3), (1, 1), (1, 1), stride);
            Branch::Sequence(vec![first, second])
        }
        BlockVariant::VarE => {
            let pre = conv_bn(rng, in_ch, (1, 1), (0, 0), (1, 1), (1, 1));
            Branch::AvgPoolBn {
                pre: Some(pre),
                kernel: (3, 3),
                stride,
                padding: (1, 1),
                bn: init.bn(rng, out_ch),
            }
        }
        BlockVariant::VarF | BlockVariant::Rsbb => {
            Branch::ConvBn(conv_bn(rng, in_ch, (3, 3), (2, 2), (2, 2), stride))
        }
    };
    branches.push(second);
    if in_ch == out_ch && stride == (1, 1) {
        branches.push(Branch::IdentityBn(init.bn(rng, out_ch)));
    }
    RepBlock::new(in_ch, out_ch, stride, branches)
}
