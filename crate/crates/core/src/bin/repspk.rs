use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use repspk::commands::{self, BuildOptions, ScoreInput, VerifyOptions};
use repspk::metrics::DcfParams;
use repspk::tensor::Precision;
use repspk::{Error, Result};

/// Build, fuse, verify and evaluate re-parameterized speaker-embedding models.
#[derive(Parser)]
#[command(name = "repspk", version)]
struct Cli {
    /// Arithmetic precision: single or double. Commands that read a model
    /// default to the precision it was stored in; build defaults to double.
    #[arg(long, global = true)]
    precision: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a deterministic training-state model.
    Build {
        /// a0, a1, a2 or toy
        #[arg(long)]
        arch: String,
        /// repvgg, var_a .. var_f, rsba or rsbb
        #[arg(long)]
        variant: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// standard, or random-bn for non-trivial batch-norm statistics
        #[arg(long, default_value = "standard")]
        init: String,
        /// Output directory for manifest.json and weights.rspk
        #[arg(long)]
        out: PathBuf,
    },
    /// Fold every block of a training-state model into one convolution.
    Fuse {
        /// Manifest file or model directory
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a fused model against its training-state source.
    Verify {
        train: PathBuf,
        fused: PathBuf,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        /// Maximum relative L-infinity error (default 1e-4 single, 1e-9 double)
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time inference and count flops in both states; prints JSON.
    Bench {
        model: PathBuf,
        #[arg(long, default_value_t = 200)]
        frames: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Compute one embedding per feature file.
    Embed {
        model: PathBuf,
        #[arg(required = true)]
        features: Vec<PathBuf>,
        /// Write the table here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score trials and report EER and minDCF.
    Score {
        /// Embedding table written by `embed`
        #[arg(long, requires = "trials", conflicts_with = "scores")]
        embeddings: Option<PathBuf>,
        /// Trial list: label<TAB>enroll_id<TAB>test_id
        #[arg(long)]
        trials: Option<PathBuf>,
        /// Precomputed score file: score<TAB>label
        #[arg(long, required_unless_present = "embeddings")]
        scores: Option<PathBuf>,
        /// Write per-trial scores here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.01)]
        p_target: f64,
        #[arg(long, default_value_t = 1.0)]
        c_fa: f64,
        #[arg(long, default_value_t = 1.0)]
        c_miss: f64,
        /// Also print raw minDCF and thresholds
        #[arg(long, short)]
        verbose: bool,
    },
    /// Per-block cosine similarity between the main and auxiliary branches.
    BranchSim { model: PathBuf, features: PathBuf },
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|()| out.flush());
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => {
            emit(text);
            Ok(())
        }
    }
}

/// Runs the command; `Ok(false)` means it completed but the check failed.
fn run(cli: Cli) -> Result<bool> {
    let precision = cli
        .precision
        .as_deref()
        .map(str::parse::<Precision>)
        .transpose()?;
    match cli.command {
        Command::Build {
            arch,
            variant,
            seed,
            init,
            out,
        } => {
            let opts = BuildOptions {
                arch: arch.parse()?,
                variant: variant.parse()?,
                seed,
                init: init.parse()?,
                precision: precision.unwrap_or(Precision::Double),
            };
            let m = commands::build(&opts, &out)?;
            emit(&format!(
                "{}: {} {} {}, {} blocks, {} parameters\n",
                out.display(),
                m.arch,
                m.variant,
                m.state,
                m.block_count(),
                m.parameter_count
            ));
        }
        Command::Fuse { model, out } => {
            let m = commands::fuse(&model, &out, precision)?;
            emit(&format!(
                "{}: {} {} {}, {} blocks, {} parameters (was {})\n",
                out.display(),
                m.arch,
                m.variant,
                m.state,
                m.block_count(),
                m.parameter_count,
                m.source_parameter_count.unwrap_or_default()
            ));
        }
        Command::Verify {
            train,
            fused,
            trials,
            tolerance,
            seed,
        } => {
            let opts = VerifyOptions {
                trials,
                tolerance,
                seed,
                precision,
            };
            let report = commands::verify(&train, &fused, &opts)?;
            emit(&format!("{report}\n"));
            return Ok(report.passed());
        }
        Command::Bench {
            model,
            frames,
            repeats,
        } => {
            let report = commands::bench(&model, frames, repeats, precision)?;
            let json =
                serde_json::to_string_pretty(&report).map_err(|e| Error::invalid(e.to_string()))?;
            emit(&format!("{json}\n"));
        }
        Command::Embed {
            model,
            features,
            out,
        } => {
            let lines = commands::embed(&model, &features, precision)?;
            let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
            write_or_print(out.as_deref(), &text)?;
        }
        Command::Score {
            embeddings,
            trials,
            scores,
            out,
            p_target,
            c_fa,
            c_miss,
            verbose,
        } => {
            let input = match (&embeddings, &trials, &scores) {
                (Some(table), Some(trials), None) => ScoreInput::Embeddings { table, trials },
                (None, _, Some(scores)) => ScoreInput::Scores(scores),
                _ => {
                    return Err(Error::invalid(
                        "give --embeddings with --trials, or --scores",
                    ))
                }
            };
            let params = DcfParams {
                p_target,
                c_fa,
                c_miss,
            };
            let report = commands::score(input, params)?;
            match out {
                Some(path) => write_or_print(Some(&path), &report.score_file())?,
                None => emit(&report.per_trial()),
            }
            emit(&report.summary(verbose));
        }
        Command::BranchSim { model, features } => {
            let rows = commands::branch_sim(&model, &features, precision)?;
            emit(&commands::format_similarity_rows(&rows));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
