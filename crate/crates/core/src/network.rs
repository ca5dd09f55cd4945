//! Backbone assembly, statistical pooling, the embedding head, AM-Softmax and
//! the branch-similarity diagnostic.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{forward_inference, make_block, BlockVariant, InitPolicy, RepBlock};
use crate::error::{check_dim, Error, Result};
use crate::reparam::{count_flops, fuse_block};
use crate::tensor::{ConvSpec, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    A0,
    A1,
    A2,
    Toy,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::A0 => "a0",
            Arch::A1 => "a1",
            Arch::A2 => "a2",
            Arch::Toy => "toy",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a0" => Ok(Arch::A0),
            "a1" => Ok(Arch::A1),
            "a2" => Ok(Arch::A2),
            "toy" => Ok(Arch::Toy),
            _ => Err(Error::invalid(format!(
                "unknown arch `{s}`; valid archs: a0, a1, a2, toy"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum State {
    Train,
    Fused,
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            State::Train => "train",
            State::Fused => "fused",
        })
    }
}

/// Topology of a backbone plus its head dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub variant: BlockVariant,
    pub width_a: f64,
    pub width_b: f64,
    /// Blocks per stage, stem first.
    pub stage_depths: [usize; 5],
    pub stage_widths: [usize; 5],
    /// Stride of the first block of each stage; later blocks use stride 1.
    pub stage_strides: [usize; 5],
    pub input_freq_bins: usize,
    pub embedding_dim: usize,
}

/// Channel and stride settings of one block in a backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

/// RepVGG-A widths: stem `min(64, 64a)`, stages `64a, 128a, 256a, 512b`.
pub fn stage_widths(a: f64, b: f64) -> [usize; 5] {
    let w = |x: f64| x.round() as usize;
    [
        w(64.0 * a).min(64),
        w(64.0 * a),
        w(128.0 * a),
        w(256.0 * a),
        w(512.0 * b),
    ]
}

impl ModelConfig {
    pub fn new(arch: Arch, variant: BlockVariant) -> Self {
        let (a, b) = match arch {
            Arch::A0 => (0.75, 2.5),
            Arch::A1 => (1.0, 2.5),
            Arch::A2 => (1.5, 2.75),
            Arch::Toy => (0.125, 0.125),
        };
        let (stage_depths, input_freq_bins, embedding_dim) = match arch {
            Arch::Toy => ([1, 1, 1, 2, 1], 16, 32),
            _ => ([1, 2, 4, 14, 1], 81, 512),
        };
        Self {
            arch,
            variant,
            width_a: a,
            width_b: b,
            stage_depths,
            stage_widths: stage_widths(a, b),
            stage_strides: [1, 1, 2, 2, 2],
            input_freq_bins,
            embedding_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_depths.contains(&0)
            || self.stage_widths.contains(&0)
            || self.stage_strides.contains(&0)
        {
            return Err(Error::invalid(
                "stage depths, widths and strides must be positive",
            ));
        }
        if self.input_freq_bins == 0 || self.embedding_dim == 0 {
            return Err(Error::invalid(
                "input_freq_bins and embedding_dim must be positive",
            ));
        }
        Ok(())
    }

    pub fn block_count(&self) -> usize {
        self.stage_depths.iter().sum()
    }

    pub fn layout(&self) -> Vec<BlockLayout> {
        let mut blocks = Vec::with_capacity(self.block_count());
        let mut channels = 1;
        for stage in 0..5 {
            for idx in 0..self.stage_depths[stage] {
                let stride = if idx == 0 {
                    self.stage_strides[stage]
                } else {
                    1
                };
                blocks.push(BlockLayout {
                    in_channels: channels,
                    out_channels: self.stage_widths[stage],
                    stride,
                });
                channels = self.stage_widths[stage];
            }
        }
        blocks
    }

    /// Spatial size after the backbone for a `freq × frames` input.
    pub fn output_hw(&self, freq: usize, frames: usize) -> (usize, usize) {
        self.layout().iter().fold((freq, frames), |(h, w), b| {
            ((h - 1) / b.stride + 1, (w - 1) / b.stride + 1)
        })
    }

    pub fn output_channels(&self) -> usize {
        self.stage_widths[4]
    }

    /// Length of the pooled `[mean ‖ std]` vector.
    pub fn pooled_dim(&self) -> usize {
        let (fout, _) = self.output_hw(self.input_freq_bins, 1);
        2 * self.output_channels() * fout
    }

    /// Smallest utterance length accepted by [`Model::forward_backbone`].
    pub fn min_frames(&self) -> usize {
        self.stage_strides.iter().product::<usize>().max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backbone<T> {
    Train(Vec<RepBlock<T>>),
    Fused(Vec<ConvSpec<T>>),
}

impl<T: Real> Backbone<T> {
    pub fn len(&self) -> usize {
        match self {
            Backbone::Train(b) => b.len(),
            Backbone::Fused(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state(&self) -> State {
        match self {
            Backbone::Train(_) => State::Train,
            Backbone::Fused(_) => State::Fused,
        }
    }

    /// Runs block `idx` in whichever state the backbone is in.
    pub fn forward_block(&self, idx: usize, input: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Backbone::Train(blocks) => blocks[idx].forward_train(input),
            Backbone::Fused(convs) => forward_inference(&convs[idx], input),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Backbone::Train(blocks) => blocks.iter().map(RepBlock::param_count).sum(),
            Backbone::Fused(convs) => convs.iter().map(ConvSpec::param_count).sum(),
        }
    }
}

/// Frame-level features `[batch][dim][frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames<T> {
    pub batch: usize,
    pub dim: usize,
    pub frames: usize,
    pub data: Vec<T>,
}

impl<T: Real> Frames<T> {
    /// Merges channel and frequency axes: `[N, C, F, T] → [N, C·F, T]`.
    pub fn from_tensor(t: Tensor<T>) -> Self {
        let [n, c, h, w] = t.shape();
        Self {
            batch: n,
            dim: c * h,
            frames: w,
            data: t.into_data(),
        }
    }

    pub fn row(&self, n: usize, d: usize) -> &[T] {
        let start = (n * self.dim + d) * self.frames;
        &self.data[start..start + self.frames]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    pub values: Vec<T>,
}

impl<T: Real> Embedding<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

const STD_VARIANCE_FLOOR: f64 = 1e-10;

/// Per-utterance `[mean ‖ std]` over the time axis. The variance is the
/// population variance, floored at 1e-10 before the square root.
pub fn statistical_pooling<T: Real>(frames: &Frames<T>) -> Result<Vec<Vec<T>>> {
    if frames.frames == 0 {
        return Err(Error::invalid(
            "statistical pooling needs at least one frame",
        ));
    }
    let count = T::of(frames.frames as f64);
    let floor = T::of(STD_VARIANCE_FLOOR);
    Ok((0..frames.batch)
        .map(|n| {
            let mut means = Vec::with_capacity(frames.dim);
            let mut stds = Vec::with_capacity(frames.dim);
            for d in 0..frames.dim {
                let row = frames.row(n, d);
                let mean = row.iter().copied().sum::<T>() / count;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / count;
                means.push(mean);
                stds.push(var.max(floor).sqrt());
            }
            means.extend(stds);
            means
        })
        .collect())
}

/// A backbone, its pooling head and the affine embedding layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    /// `[embedding_dim][pooled_dim]`, row-major.
    pub embed_weight: Vec<T>,
    pub embed_bias: Vec<T>,
}

/// Deterministic training-state model for `(arch, variant, seed)`.
pub fn build_model<T: Real>(arch: Arch, variant: BlockVariant, seed: u64) -> Model<T> {
    Model::build(ModelConfig::new(arch, variant), seed, InitPolicy::Standard)
        .expect("preset configurations are valid")
}

impl<T: Real> Model<T> {
    pub fn build(config: ModelConfig, seed: u64, init: InitPolicy) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = config
            .layout()
            .iter()
            .map(|b| {
                make_block(
                    config.variant,
                    b.in_channels,
                    b.out_channels,
                    (b.stride, b.stride),
                    init,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let pooled = config.pooled_dim();
        let bound = 1.0 / (pooled as f64).sqrt();
        let embed_weight = (0..config.embedding_dim * pooled)
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        let embed_bias = (0..config.embedding_dim)
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        Ok(Self {
            config,
            backbone: Backbone::Train(blocks),
            embed_weight,
            embed_bias,
        })
    }

    pub fn state(&self) -> State {
        self.backbone.state()
    }

    /// Inference-state copy of this model: every block becomes one conv.
    pub fn fuse(&self) -> Result<Self> {
        let convs = match &self.backbone {
            Backbone::Train(blocks) => blocks.iter().map(fuse_block).collect::<Result<Vec<_>>>()?,
            Backbone::Fused(_) => return Err(Error::invalid("model is already fused")),
        };
        Ok(Self {
            config: self.config.clone(),
            backbone: Backbone::Fused(convs),
            embed_weight: self.embed_weight.clone(),
            embed_bias: self.embed_bias.clone(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count() + self.embed_weight.len() + self.embed_bias.len()
    }

    pub(crate) fn check_features(&self, features: &Tensor<T>) -> Result<()> {
        check_dim("features", "channel", 1, features.channels())?;
        check_dim(
            "features",
            "frequency bins",
            self.config.input_freq_bins,
            features.height(),
        )?;
        if features.width() < self.config.min_frames() {
            return Err(Error::invalid(format!(
                "utterance has {} frames; at least {} are needed for the strided stages",
                features.width(),
                self.config.min_frames()
            )));
        }
        Ok(())
    }

    /// Runs every block and merges channels with frequency: `[N, C·F', T']`.
    pub fn forward_backbone(&self, features: &Tensor<T>) -> Result<Frames<T>> {
        self.check_features(features)?;
        let mut x = features.clone();
        for idx in 0..self.backbone.len() {
            x = self.backbone.forward_block(idx, &x)?;
        }
        Ok(Frames::from_tensor(x))
    }

    /// One embedding per utterance in the batch.
    pub fn embed(&self, features: &Tensor<T>) -> Result<Vec<Embedding<T>>> {
        let pooled = statistical_pooling(&self.forward_backbone(features)?)?;
        let dim = self.config.pooled_dim();
        pooled
            .iter()
            .map(|p| {
                check_dim("embedding head", "pooled dim", dim, p.len())?;
                let values = self
                    .embed_weight
                    .chunks_exact(dim)
                    .zip(&self.embed_bias)
                    .map(|(row, &b)| {
                        row.iter()
                            .zip(p)
                            .fold(T::zero(), |acc, (&w, &x)| acc + w * x)
                            + b
                    })
                    .collect();
                Ok(Embedding { values })
            })
            .collect()
    }

    /// Analytic flops of each block for a `[1, 1, F, frames]` input.
    pub fn block_flops(&self, frames: usize) -> Result<Vec<u64>> {
        let mut shape = [1, 1, self.config.input_freq_bins, frames];
        let layout = self.config.layout();
        let mut out = Vec::with_capacity(layout.len());
        for (idx, b) in layout.iter().enumerate() {
            out.push(match &self.backbone {
                Backbone::Train(blocks) => count_flops(&blocks[idx], shape)?,
                Backbone::Fused(convs) => count_flops(&convs[idx], shape)?,
            });
            shape = [
                1,
                b.out_channels,
                (shape[2] - 1) / b.stride + 1,
                (shape[3] - 1) / b.stride + 1,
            ];
        }
        Ok(out)
    }

    /// Per-block branch similarity on the activations `features` produce.
    /// Row `i` belongs to block `i` (the stem is block 0).
    pub fn branch_similarity(&self, features: &Tensor<T>) -> Result<Vec<Vec<Option<f64>>>> {
        let blocks = match &self.backbone {
            Backbone::Train(blocks) => blocks,
            Backbone::Fused(_) => {
                return Err(Error::invalid(
                    "branch similarity needs a training-state model",
                ))
            }
        };
        self.check_features(features)?;
        let mut x = features.clone();
        let mut rows = Vec::with_capacity(blocks.len());
        for block in blocks {
            rows.push(branch_similarity(block, &x)?);
            x = block.forward_train(&x)?;
        }
        Ok(rows)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some((dot / (na * nb)).clamp(-1.0, 1.0))
    }
}

/// Cosine similarity between the main branch's pre-addition output and each
/// other non-identity branch, averaged over the batch. `None` marks an
/// undefined value (some sample produced an all-zero branch output).
pub fn branch_similarity<T: Real>(
    block: &RepBlock<T>,
    input: &Tensor<T>,
) -> Result<Vec<Option<f64>>> {
    let main = block
        .main_branch()
        .ok_or_else(|| Error::invalid("block has no main conv-bn branch"))?;
    let outputs = block.branch_outputs(input)?;
    let batch = input.batch();
    let flat = |t: &Tensor<T>, n: usize| -> Vec<f64> {
        t.sample(n).data().iter().map(|v| v.as_f64()).collect()
    };
    let mains: Vec<Vec<f64>> = (0..batch).map(|n| flat(&outputs[main], n)).collect();
    let others: Vec<usize> = block
        .branches()
        .iter()
        .enumerate()
        .filter(|(i, b)| *i != main && !b.is_identity())
        .map(|(i, _)| i)
        .collect();
    if others.is_empty() {
        return Err(Error::invalid(
            "branch similarity needs at least one auxiliary non-identity branch",
        ));
    }
    Ok(others
        .into_iter()
        .map(|b| {
            let mut total = 0.0;
            for (n, m) in mains.iter().enumerate() {
                total += cosine(m, &flat(&outputs[b], n))?;
            }
            Some(total / batch as f64)
        })
        .collect())
}

/// Mean additive-margin softmax loss over `labels.len()` rows of
/// `num_classes` cosine logits each.
pub fn am_softmax_loss(
    cosines: &[f64],
    num_classes: usize,
    labels: &[usize],
    scale: f64,
    margin: f64,
) -> Result<f64> {
    if num_classes == 0 || labels.is_empty() {
        return Err(Error::invalid(
            "am_softmax_loss needs at least one sample and class",
        ));
    }
    check_dim(
        "am_softmax_loss",
        "cosine count",
        labels.len() * num_classes,
        cosines.len(),
    )?;
    if cosines.iter().any(|c| !(-1.0..=1.0).contains(c)) {
        return Err(Error::invalid("cosines must lie in [-1, 1]"));
    }
    let mut total = 0.0;
    for (row, &y) in cosines.chunks_exact(num_classes).zip(labels) {
        if y >= num_classes {
            return Err(Error::invalid(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        let target = scale * (row[y] - margin);
        // loss = ln(1 + Σ_{j≠y} exp(z_j − z_y))
        let diffs: Vec<f64> = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != y)
            .map(|(_, &c)| scale * c - target)
            .collect();
        let peak = diffs.iter().copied().fold(0.0f64, f64::max);
        let loss = if peak == 0.0 {
            diffs.iter().map(|d| d.exp()).sum::<f64>().ln_1p()
        } else {
            peak + ((-peak).exp() + diffs.iter().map(|d| (d - peak).exp()).sum::<f64>()).ln()
        };
        total += loss;
    }
    Ok(total / labels.len() as f64)
}
