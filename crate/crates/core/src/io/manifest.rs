//! Model directories: a JSON manifest next to an `RSPK` weight file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockVariant, Branch, ConvBn, InitPolicy, RepBlock};
use crate::error::{Error, Result};
use crate::io::weights::{read_weights, write_weights, NamedTensor, TensorData};
use crate::network::{Arch, Backbone, Model, ModelConfig, State};
use crate::tensor::{BnParams, ConvSpec, Kernel, Precision, Real};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.rspk";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format_version: u32,
    pub arch: Arch,
    pub variant: String,
    pub state: State,
    pub width_a: f64,
    pub width_b: f64,
    pub stage_depths: Vec<usize>,
    pub stage_widths: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub input_freq_bins: usize,
    pub embedding_dim: usize,
    pub precision: Precision,
    pub weight_file: String,
    /// Shared epsilon of every batch norm; training state only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bn_epsilon: Option<f64>,
    /// Sum of the element counts in `tensors`.
    pub parameter_count: usize,
    /// Parameter count of the training-state model a fused model came from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_parameter_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

impl ModelManifest {
    /// The preset configuration this manifest describes, checked field by field.
    pub fn config(&self) -> Result<ModelConfig> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::format(
                "manifest",
                format!("unsupported format_version {}", self.format_version),
            ));
        }
        let variant: BlockVariant = self.variant.parse()?;
        let config = ModelConfig::new(self.arch, variant);
        let agrees = self.width_a == config.width_a
            && self.width_b == config.width_b
            && self.stage_depths == config.stage_depths
            && self.stage_widths == config.stage_widths
            && self.stage_strides == config.stage_strides
            && self.input_freq_bins == config.input_freq_bins
            && self.embedding_dim == config.embedding_dim;
        if !agrees {
            return Err(Error::format(
                "manifest",
                format!("topology fields disagree with the {} preset", self.arch),
            ));
        }
        Ok(config)
    }

    pub fn block_count(&self) -> usize {
        self.stage_depths.iter().sum()
    }
}

/// A mutable view of one named parameter tensor inside a model.
struct Slot<'a, T> {
    name: String,
    shape: Vec<usize>,
    data: &'a mut [T],
}

#[derive(Default)]
struct Slots<'a, T> {
    tensors: Vec<Slot<'a, T>>,
    epsilons: Vec<&'a mut T>,
}

impl<'a, T: Real> Slots<'a, T> {
    fn push(&mut self, name: String, shape: Vec<usize>, data: &'a mut [T]) {
        self.tensors.push(Slot { name, shape, data });
    }

    fn kernel(&mut self, name: String, k: &'a mut Kernel<T>) {
        let (kh, kw) = k.size();
        let shape = vec![k.out_channels(), k.in_channels(), kh, kw];
        self.push(name, shape, k.data_mut());
    }

    fn bn(&mut self, prefix: &str, bn: &'a mut BnParams<T>) {
        let BnParams {
            gamma,
            beta,
            mean,
            var,
            epsilon,
        } = bn;
        for (field, v) in [
            ("gamma", gamma),
            ("beta", beta),
            ("mean", mean),
            ("var", var),
        ] {
            self.push(
                format!("{prefix}.bn.{field}"),
                vec![v.len()],
                v.as_mut_slice(),
            );
        }
        self.epsilons.push(epsilon);
    }

    fn conv_bn(&mut self, prefix: &str, unit: &'a mut ConvBn<T>) {
        self.kernel(format!("{prefix}.conv.weight"), &mut unit.conv.weight);
        self.bn(prefix, &mut unit.bn);
    }
}

/// A model taken apart so every parameter can be borrowed mutably; blocks
/// are re-validated when reassembled.
struct Parts<T> {
    config: ModelConfig,
    train: Vec<(usize, usize, (usize, usize), Vec<Branch<T>>)>,
    fused: Vec<ConvSpec<T>>,
    embed_weight: Vec<T>,
    embed_bias: Vec<T>,
}

impl<T: Real> Parts<T> {
    fn from_model(model: Model<T>) -> Self {
        let (train, fused) = match model.backbone {
            Backbone::Train(blocks) => (
                blocks
                    .into_iter()
                    .map(|b| {
                        (
                            b.in_channels(),
                            b.out_channels(),
                            b.stride(),
                            b.into_branches(),
                        )
                    })
                    .collect(),
                Vec::new(),
            ),
            Backbone::Fused(convs) => (Vec::new(), convs),
        };
        Self {
            config: model.config,
            train,
            fused,
            embed_weight: model.embed_weight,
            embed_bias: model.embed_bias,
        }
    }

    fn into_model(self, state: State) -> Result<Model<T>> {
        let backbone = match state {
            State::Train => Backbone::Train(
                self.train
                    .into_iter()
                    .map(|(cin, cout, stride, branches)| RepBlock::new(cin, cout, stride, branches))
                    .collect::<Result<Vec<_>>>()?,
            ),
            State::Fused => {
                for conv in &self.fused {
                    conv.validate()?;
                }
                Backbone::Fused(self.fused)
            }
        };
        Ok(Model {
            config: self.config,
            backbone,
            embed_weight: self.embed_weight,
            embed_bias: self.embed_bias,
        })
    }

    fn slots(&mut self) -> Slots<'_, T> {
        let mut slots = Slots::default();
        for (i, (_, _, _, branches)) in self.train.iter_mut().enumerate() {
            for (j, branch) in branches.iter_mut().enumerate() {
                let prefix = format!("block{i}.branch{j}");
                match branch {
                    Branch::ConvBn(unit) => slots.conv_bn(&prefix, unit),
                    Branch::Sequence(stages) => {
                        for (k, unit) in stages.iter_mut().enumerate() {
                            slots.conv_bn(&format!("{prefix}.stage{k}"), unit);
                        }
                    }
                    Branch::AvgPoolBn { pre, bn, .. } => {
                        if let Some(unit) = pre {
                            slots.conv_bn(&format!("{prefix}.pre"), unit);
                        }
                        slots.bn(&prefix, bn);
                    }
                    Branch::IdentityBn(bn) => slots.bn(&prefix, bn),
                }
            }
        }
        for (i, conv) in self.fused.iter_mut().enumerate() {
            slots.kernel(format!("block{i}.fused.weight"), &mut conv.weight);
            let bias = conv.bias.as_mut().expect("fused convolutions carry a bias");
            slots.push(format!("block{i}.fused.bias"), vec![bias.len()], bias);
        }
        let (emb, pooled) = (self.config.embedding_dim, self.config.pooled_dim());
        slots.push(
            "embed.weight".into(),
            vec![emb, pooled],
            &mut self.embed_weight,
        );
        slots.push("embed.bias".into(), vec![emb], &mut self.embed_bias);
        slots
    }
}

/// Zero-valued model of the right structure for `state`.
fn skeleton<T: Real>(config: &ModelConfig, state: State) -> Result<Model<T>> {
    let mut model = Model::build(config.clone(), 0, InitPolicy::Standard)?;
    if state == State::Fused {
        let (kh, kw) = config.variant.fused_kernel();
        let convs = config
            .layout()
            .iter()
            .map(|b| {
                ConvSpec::new(Kernel::zeros(b.out_channels, b.in_channels, (kh, kw)))
                    .with_stride((b.stride, b.stride))
                    .with_padding(((kh - 1) / 2, (kw - 1) / 2))
                    .with_bias(vec![T::zero(); b.out_channels])
            })
            .collect();
        model.backbone = Backbone::Fused(convs);
    }
    Ok(model)
}

/// Provenance recorded alongside the weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub init: Option<String>,
    pub source_parameter_count: Option<usize>,
}

/// Writes `manifest.json` and `weights.rspk` into `dir`, creating it if needed.
pub fn save_model<T: Real>(
    model: &Model<T>,
    dir: &Path,
    provenance: &Provenance,
) -> Result<ModelManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let state = model.state();
    let mut parts = Parts::from_model(model.clone());
    let slots = parts.slots();
    let bn_epsilon = match slots.epsilons.split_first() {
        None => None,
        Some((first, rest)) => {
            if rest.iter().any(|e| **e != **first) {
                return Err(Error::invalid(
                    "all batch norms must share one epsilon to be saved",
                ));
            }
            Some(first.as_f64())
        }
    };
    let mut tensors = Vec::with_capacity(slots.tensors.len());
    let mut entries = Vec::with_capacity(slots.tensors.len());
    for slot in &slots.tensors {
        entries.push(TensorEntry {
            name: slot.name.clone(),
            shape: slot.shape.clone(),
        });
        tensors.push(NamedTensor {
            name: slot.name.clone(),
            shape: slot.shape.clone(),
            data: TensorData::from_real(slot.data),
        });
    }
    let config = &model.config;
    let manifest = ModelManifest {
        format_version: MANIFEST_VERSION,
        arch: config.arch,
        variant: config.variant.name().to_owned(),
        state,
        width_a: config.width_a,
        width_b: config.width_b,
        stage_depths: config.stage_depths.to_vec(),
        stage_widths: config.stage_widths.to_vec(),
        stage_strides: config.stage_strides.to_vec(),
        input_freq_bins: config.input_freq_bins,
        embedding_dim: config.embedding_dim,
        precision: T::PRECISION,
        weight_file: WEIGHTS_FILE.to_owned(),
        bn_epsilon,
        parameter_count: entries
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum(),
        source_parameter_count: provenance.source_parameter_count,
        seed: provenance.seed,
        init: provenance.init.clone(),
        tensors: entries,
    };
    write_weights(&dir.join(WEIGHTS_FILE), &tensors)?;
    let mut json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format("manifest", e.to_string()))?;
    json.push('\n');
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Accepts either a manifest file or the directory containing one.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<ModelManifest> {
    let path = manifest_path(path);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::format("manifest", format!("{}: {e}", path.display())))
}

/// Reads a model in precision `T`, converting stored values if the file
/// was written in the other precision.
pub fn load_model<T: Real>(path: &Path) -> Result<(ModelManifest, Model<T>)> {
    let path = manifest_path(path);
    let manifest = read_manifest(&path)?;
    let config = manifest.config()?;
    let bad = |reason: String| Error::format("model", format!("{}: {reason}", path.display()));

    let mut parts = Parts::from_model(skeleton::<T>(&config, manifest.state)?);
    let mut slots = parts.slots();
    let expected: Vec<TensorEntry> = slots
        .tensors
        .iter()
        .map(|s| TensorEntry {
            name: s.name.clone(),
            shape: s.shape.clone(),
        })
        .collect();
    if manifest.tensors != expected {
        let first = manifest
            .tensors
            .iter()
            .zip(&expected)
            .find(|(a, b)| a != b)
            .map(|(a, b)| {
                format!(
                    "found `{}` {:?}, expected `{}` {:?}",
                    a.name, a.shape, b.name, b.shape
                )
            })
            .unwrap_or_else(|| {
                format!(
                    "{} tensors listed, expected {}",
                    manifest.tensors.len(),
                    expected.len()
                )
            });
        return Err(bad(format!(
            "tensor index does not match the {} {} model: {first}",
            manifest.arch, manifest.state
        )));
    }
    let listed: usize = expected
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if manifest.parameter_count != listed {
        return Err(bad(format!(
            "parameter_count {} disagrees with the tensor index ({listed})",
            manifest.parameter_count
        )));
    }

    let weights_path = path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&manifest.weight_file);
    let stored = read_weights(&weights_path)?;
    if stored.len() != slots.tensors.len() {
        return Err(bad(format!(
            "weight file holds {} tensors, manifest lists {}",
            stored.len(),
            slots.tensors.len()
        )));
    }
    for (slot, tensor) in slots.tensors.iter_mut().zip(&stored) {
        if tensor.name != slot.name || tensor.shape != slot.shape {
            return Err(bad(format!(
                "weight file entry `{}` {:?} does not match manifest entry `{}` {:?}",
                tensor.name, tensor.shape, slot.name, slot.shape
            )));
        }
        let values = tensor.data.to_real::<T>();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!(
                "tensor `{}` holds non-finite values",
                slot.name
            )));
        }
        slot.data.copy_from_slice(&values);
    }
    match (manifest.state, manifest.bn_epsilon) {
        (State::Train, Some(eps)) => slots.epsilons.iter_mut().for_each(|e| **e = T::of(eps)),
        (State::Train, None) => return Err(bad("training-state manifest lacks bn_epsilon".into())),
        (State::Fused, _) => {}
    }
    drop(slots);
    let model = parts.into_model(manifest.state)?;
    Ok((manifest, model))
}
