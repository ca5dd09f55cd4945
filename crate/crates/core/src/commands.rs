//! The operations behind each `repspk` subcommand. Each returns a report
//! the binary prints; nothing here writes to stdout.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::blocks::{forward_inference, BlockVariant, InitPolicy};
use crate::error::{Error, Result};
use crate::io::manifest::{load_model, read_manifest, save_model, ModelManifest, Provenance};
use crate::io::{format_embedding_line, parse_embedding_table, parse_trial_list, FeatureFile};
use crate::metrics::{
    compute_eer, compute_mindcf, cosine_score, format_score_file, parse_score_file, DcfParams,
    DcfResult, EerResult, ScoredTrial,
};
use crate::network::{Arch, Backbone, Model, ModelConfig, State};
use crate::tensor::{relative_linf, Precision, Real, Tensor};

/// Runs `$body` with `$t` bound to the element type for `$precision`.
macro_rules! with_precision {
    ($precision:expr, $t:ident => $body:expr) => {
        match $precision {
            Precision::Single => {
                type $t = f32;
                $body
            }
            Precision::Double => {
                type $t = f64;
                $body
            }
        }
    };
}

/// Precision for a command that reads `manifest`: the explicit choice, or
/// whatever the model was stored in.
fn resolve_precision(explicit: Option<Precision>, manifest: &Path) -> Result<Precision> {
    match explicit {
        Some(p) => Ok(p),
        None => Ok(read_manifest(manifest)?.precision),
    }
}

fn random_features<T: Real>(rng: &mut ChaCha8Rng, bins: usize, frames: usize) -> Tensor<T> {
    Tensor::from_fn([1, 1, bins, frames], |_, _, _, _| {
        T::of(rng.random_range(-1.0..1.0))
    })
}

pub struct BuildOptions {
    pub arch: Arch,
    pub variant: BlockVariant,
    pub seed: u64,
    pub init: InitPolicy,
    pub precision: Precision,
}

pub fn build(opts: &BuildOptions, out_dir: &Path) -> Result<ModelManifest> {
    let config = ModelConfig::new(opts.arch, opts.variant);
    let provenance = Provenance {
        seed: Some(opts.seed),
        init: Some(opts.init.name().to_owned()),
        source_parameter_count: None,
    };
    with_precision!(opts.precision, T => {
        let model = Model::<T>::build(config, opts.seed, opts.init)?;
        save_model(&model, out_dir, &provenance)
    })
}

pub fn fuse(input: &Path, out_dir: &Path, precision: Option<Precision>) -> Result<ModelManifest> {
    let precision = resolve_precision(precision, input)?;
    with_precision!(precision, T => {
        let (manifest, model) = load_model::<T>(input)?;
        if manifest.state == State::Fused {
            return Err(Error::invalid(format!("{} is already fused", input.display())));
        }
        let fused = model.fuse()?;
        let provenance = Provenance {
            seed: manifest.seed,
            init: manifest.init.clone(),
            source_parameter_count: Some(manifest.parameter_count),
        };
        save_model(&fused, out_dir, &provenance)
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub trials: usize,
    pub tolerance: f64,
    /// Worst relative L∞ error of each block over all trials.
    pub block_errors: Vec<f64>,
    pub end_to_end_error: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.block_errors
            .iter()
            .chain([&self.end_to_end_error])
            .all(|&e| e <= self.tolerance)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "block\tmax_rel_error")?;
        for (i, e) in self.block_errors.iter().enumerate() {
            writeln!(f, "{i}\t{e:.3e}")?;
        }
        writeln!(f, "end-to-end\t{:.3e}", self.end_to_end_error)?;
        write!(
            f,
            "{} trials, tolerance {:.1e}: {}",
            self.trials,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

pub struct VerifyOptions {
    pub trials: usize,
    pub tolerance: Option<f64>,
    pub seed: u64,
    pub precision: Option<Precision>,
}

pub fn verify(train: &Path, fused: &Path, opts: &VerifyOptions) -> Result<VerifyReport> {
    if opts.trials == 0 {
        return Err(Error::invalid("verify needs at least one trial"));
    }
    let precision = resolve_precision(opts.precision, train)?;
    let tolerance = opts.tolerance.unwrap_or(precision.default_tolerance());
    if !(tolerance >= 0.0) {
        return Err(Error::invalid("tolerance must be non-negative"));
    }
    with_precision!(precision, T => {
        let (tm, train_model) = load_model::<T>(train)?;
        let (fm, fused_model) = load_model::<T>(fused)?;
        if tm.state != State::Train || fm.state != State::Fused {
            return Err(Error::invalid(format!(
                "verify expects a train-state and a fused-state model, got {} and {}",
                tm.state, fm.state
            )));
        }
        if train_model.config != fused_model.config {
            return Err(Error::invalid(format!(
                "architecture mismatch: {} {} vs {} {}",
                tm.arch, tm.variant, fm.arch, fm.variant
            )));
        }
        verify_models(&train_model, &fused_model, opts.trials, tolerance, opts.seed)
    })
}

/// Compares the two states block by block and end to end on random inputs.
pub fn verify_models<T: Real>(
    train: &Model<T>,
    fused: &Model<T>,
    trials: usize,
    tolerance: f64,
    seed: u64,
) -> Result<VerifyReport> {
    let (Backbone::Train(blocks), Backbone::Fused(convs)) = (&train.backbone, &fused.backbone)
    else {
        return Err(Error::invalid(
            "verify expects a train-state and a fused-state model",
        ));
    };
    let cfg = &train.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut block_errors = vec![0.0f64; blocks.len()];
    let mut end_to_end_error = 0.0f64;
    let lo = cfg.min_frames().max(16);
    for _ in 0..trials {
        let frames = rng.random_range(lo..=lo.max(64));
        let x = random_features::<T>(&mut rng, cfg.input_freq_bins, frames);
        let mut act = x.clone();
        for (i, (block, conv)) in blocks.iter().zip(convs).enumerate() {
            let reference = block.forward_train(&act)?;
            let candidate = forward_inference(conv, &act)?;
            let err = relative_linf(reference.data(), candidate.data());
            block_errors[i] = block_errors[i].max(err);
            act = reference;
        }
        let a = train.embed(&x)?;
        let b = fused.embed(&x)?;
        end_to_end_error = end_to_end_error.max(relative_linf(&a[0].values, &b[0].values));
    }
    Ok(VerifyReport {
        trials,
        tolerance,
        block_errors,
        end_to_end_error,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockBench {
    pub index: usize,
    pub train_flops: Option<u64>,
    pub fused_flops: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub arch: Arch,
    pub variant: String,
    pub precision: Precision,
    pub frames: usize,
    pub repeats: usize,
    pub train_flops: Option<u64>,
    pub fused_flops: u64,
    /// `fused_flops / train_flops`.
    pub flop_ratio: Option<f64>,
    pub train_params: Option<usize>,
    pub fused_params: usize,
    pub train_seconds_median: Option<f64>,
    pub fused_seconds_median: f64,
    pub blocks: Vec<BlockBench>,
}

fn median_seconds<T: Real>(model: &Model<T>, x: &Tensor<T>, repeats: usize) -> Result<f64> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        std::hint::black_box(model.embed(x)?);
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    Ok(if times.len() % 2 == 1 {
        times[mid]
    } else {
        (times[mid - 1] + times[mid]) / 2.0
    })
}

/// Times the embedding pipeline and counts analytic flops in both states.
/// A fused input only yields the fused-state half of the report.
pub fn bench(
    manifest: &Path,
    frames: usize,
    repeats: usize,
    precision: Option<Precision>,
) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::invalid("bench needs at least one repeat"));
    }
    let precision = resolve_precision(precision, manifest)?;
    with_precision!(precision, T => {
        let (m, model) = load_model::<T>(manifest)?;
        bench_model(&model, &m.variant, frames, repeats)
    })
}

pub fn bench_model<T: Real>(
    model: &Model<T>,
    variant: &str,
    frames: usize,
    repeats: usize,
) -> Result<BenchReport> {
    let cfg = &model.config;
    if frames < cfg.min_frames() {
        return Err(Error::invalid(format!(
            "bench needs at least {} frames",
            cfg.min_frames()
        )));
    }
    let (train, fused) = match model.state() {
        State::Train => (Some(model), model.fuse()?),
        State::Fused => (None, model.clone()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_features::<T>(&mut rng, cfg.input_freq_bins, frames);
    let fused_blocks = fused.block_flops(frames)?;
    let train_blocks = train.map(|m| m.block_flops(frames)).transpose()?;
    let train_flops = train_blocks.as_ref().map(|b| b.iter().sum::<u64>());
    let fused_flops = fused_blocks.iter().sum::<u64>();
    let blocks = fused_blocks
        .iter()
        .enumerate()
        .map(|(index, &f)| BlockBench {
            index,
            train_flops: train_blocks.as_ref().map(|b| b[index]),
            fused_flops: f,
        })
        .collect();
    Ok(BenchReport {
        arch: cfg.arch,
        variant: variant.to_owned(),
        precision: T::PRECISION,
        frames,
        repeats,
        train_flops,
        fused_flops,
        flop_ratio: train_flops.map(|t| fused_flops as f64 / t as f64),
        train_params: train.map(Model::param_count),
        fused_params: fused.param_count(),
        train_seconds_median: train.map(|m| median_seconds(m, &x, repeats)).transpose()?,
        fused_seconds_median: median_seconds(&fused, &x, repeats)?,
        blocks,
    })
}

/// Utterance id of a feature file: its file stem.
pub fn utterance_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn load_features<T: Real>(path: &Path, config: &ModelConfig) -> Result<Tensor<T>> {
    let file = FeatureFile::read(path)?;
    let located =
        |reason: String| Error::format("feature file", format!("{}: {reason}", path.display()));
    if file.frames == 0 {
        return Err(located("zero-length utterance (0 frames)".into()));
    }
    if file.bins != config.input_freq_bins {
        return Err(located(format!(
            "{} frequency bins, but the model expects F = {}",
            file.bins, config.input_freq_bins
        )));
    }
    if file.frames < config.min_frames() {
        return Err(located(format!(
            "{} frames, but the model needs at least {}",
            file.frames,
            config.min_frames()
        )));
    }
    file.to_tensor().map_err(|e| located(e.to_string()))
}

/// One embedding line per feature file, in input order.
pub fn embed(
    manifest: &Path,
    features: &[PathBuf],
    precision: Option<Precision>,
) -> Result<Vec<String>> {
    let precision = resolve_precision(precision, manifest)?;
    with_precision!(precision, T => {
        let (_, model) = load_model::<T>(manifest)?;
        embed_files(&model, features)
    })
}

pub fn embed_files<T: Real>(model: &Model<T>, features: &[PathBuf]) -> Result<Vec<String>> {
    features
        .par_iter()
        .map(|path| {
            let x = load_features::<T>(path, &model.config)?;
            let emb = model.embed(&x)?;
            Ok(format_embedding_line(&utterance_id(path), &emb[0]))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ScoreReport {
    /// `(enroll, test)` ids when scores came from embeddings.
    pub pairs: Option<Vec<(String, String)>>,
    pub trials: Vec<ScoredTrial>,
    pub eer: EerResult,
    pub dcf: DcfResult,
    pub params: DcfParams,
}

impl ScoreReport {
    pub fn summary(&self, verbose: bool) -> String {
        let mut out = format!(
            "trials: {}\nEER: {:.4}%\nminDCF: {:.4}\n",
            self.trials.len(),
            100.0 * self.eer.eer,
            self.dcf.min_dcf
        );
        if verbose {
            out.push_str(&format!(
                "EER threshold: {}\nminDCF (raw): {}\nminDCF threshold: {}\np_target: {}, c_fa: {}, c_miss: {}\n",
                self.eer.threshold,
                self.dcf.raw,
                self.dcf.threshold,
                self.params.p_target,
                self.params.c_fa,
                self.params.c_miss
            ));
        }
        out
    }

    pub fn score_file(&self) -> String {
        format_score_file(&self.trials)
    }

    /// `enroll<TAB>test<TAB>score<TAB>label`, or the score file when no ids
    /// are known.
    pub fn per_trial(&self) -> String {
        match &self.pairs {
            None => self.score_file(),
            Some(pairs) => pairs
                .iter()
                .zip(&self.trials)
                .map(|((e, t), s)| format!("{e}\t{t}\t{}\t{}\n", s.score, u8::from(s.target)))
                .collect(),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub enum ScoreInput<'a> {
    Embeddings { table: &'a Path, trials: &'a Path },
    Scores(&'a Path),
}

pub fn score(input: ScoreInput<'_>, params: DcfParams) -> Result<ScoreReport> {
    params.validate()?;
    let (pairs, trials) = match input {
        ScoreInput::Scores(path) => (None, parse_score_file(&read_text(path)?)?),
        ScoreInput::Embeddings { table, trials } => {
            let table = parse_embedding_table(&read_text(table)?)?;
            let list = parse_trial_list(&read_text(trials)?)?;
            score_trials(&table, &list)?
        }
    };
    Ok(ScoreReport {
        pairs,
        eer: compute_eer(&trials)?,
        dcf: compute_mindcf(&trials, params)?,
        trials,
        params,
    })
}

type ScoredPairs = (Option<Vec<(String, String)>>, Vec<ScoredTrial>);

fn score_trials(
    table: &HashMap<String, crate::network::Embedding<f64>>,
    list: &[crate::io::Trial],
) -> Result<ScoredPairs> {
    let lookup = |id: &str| {
        table
            .get(id)
            .ok_or_else(|| Error::invalid(format!("unknown utterance id `{id}` in trial list")))
    };
    let mut pairs = Vec::with_capacity(list.len());
    let mut trials = Vec::with_capacity(list.len());
    for t in list {
        let s = cosine_score(lookup(&t.enroll)?, lookup(&t.test)?)?;
        pairs.push((t.enroll.clone(), t.test.clone()));
        trials.push(ScoredTrial::new(s, t.target)?);
    }
    Ok((Some(pairs), trials))
}

/// Similarity rows, one per block; `None` marks an undefined value.
pub fn branch_sim(
    manifest: &Path,
    features: &Path,
    precision: Option<Precision>,
) -> Result<Vec<Vec<Option<f64>>>> {
    let precision = resolve_precision(precision, manifest)?;
    with_precision!(precision, T => {
        let (m, model) = load_model::<T>(manifest)?;
        if m.state != State::Train {
            return Err(Error::invalid("branch-sim needs a training-state model; this one is fused"));
        }
        let x = load_features::<T>(features, &model.config)?;
        model.branch_similarity(&x)
    })
}

pub fn format_similarity_rows(rows: &[Vec<Option<f64>>]) -> String {
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let cells: Vec<String> = row
                .iter()
                .map(|v| v.map_or_else(|| "undef".to_owned(), |s| format!("{s:.6}")))
                .collect();
            format!("{i}\t{}\n", cells.join("\t"))
        })
        .collect()
}
