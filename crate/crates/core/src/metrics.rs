//! Cosine scoring and the two verification metrics: equal error rate and
//! normalized minimum detection cost.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::network::Embedding;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredTrial {
    pub score: f64,
    pub target: bool,
}

impl ScoredTrial {
    pub fn new(score: f64, target: bool) -> Result<Self> {
        if !score.is_finite() {
            return Err(Error::invalid(format!("trial score {score} is not finite")));
        }
        Ok(Self { score, target })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_fa: f64,
    pub c_miss: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_fa: 1.0,
            c_miss: 1.0,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::invalid("p_target must lie strictly between 0 and 1"));
        }
        if !(self.c_fa > 0.0 && self.c_miss > 0.0)
            || !self.c_fa.is_finite()
            || !self.c_miss.is_finite()
        {
            return Err(Error::invalid("c_fa and c_miss must be positive"));
        }
        Ok(())
    }

    /// Cost of the better trivial system; the normalization constant.
    pub fn default_cost(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfResult {
    pub min_dcf: f64,
    pub raw: f64,
    pub threshold: f64,
}

pub fn cosine_score<T: Real>(a: &Embedding<T>, b: &Embedding<T>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            context: "cosine_score",
            axis: "embedding length",
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.values.iter().zip(&b.values) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine score of a zero-norm embedding"));
    }
    // sqrt(na·nb) is exactly na when a == b, so self-similarity is exactly 1.
    let norm = match (na * nb).sqrt() {
        n if n.is_normal() => n,
        _ => na.sqrt() * nb.sqrt(),
    };
    Ok((dot / norm).clamp(-1.0, 1.0))
}

/// Error rates at one candidate threshold.
#[derive(Debug, Clone, Copy)]
struct RatePoint {
    threshold: f64,
    frr: f64,
    far: f64,
}

fn class_counts(trials: &[ScoredTrial]) -> Result<(usize, usize)> {
    if let Some(t) = trials.iter().find(|t| !t.score.is_finite()) {
        return Err(Error::invalid(format!(
            "trial score {} is not finite",
            t.score
        )));
    }
    let targets = trials.iter().filter(|t| t.target).count();
    let nontargets = trials.len() - targets;
    if targets == 0 || nontargets == 0 {
        return Err(Error::invalid(
            "metrics need at least one target and one nontarget trial",
        ));
    }
    Ok((targets, nontargets))
}

/// Miss and false-alarm rates at every distinct score plus one threshold
/// above the maximum, ascending. A trial is accepted iff `score ≥ threshold`.
fn sweep(trials: &[ScoredTrial]) -> Result<Vec<RatePoint>> {
    let (targets, nontargets) = class_counts(trials)?;
    let mut sorted: Vec<ScoredTrial> = trials.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));

    let mut points = Vec::new();
    let (mut missed, mut rejected_non) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].score;
        points.push(RatePoint {
            threshold: t,
            frr: missed as f64 / targets as f64,
            far: (nontargets - rejected_non) as f64 / nontargets as f64,
        });
        while i < sorted.len() && sorted[i].score == t {
            if sorted[i].target {
                missed += 1;
            } else {
                rejected_non += 1;
            }
            i += 1;
        }
    }
    points.push(RatePoint {
        threshold: sorted[sorted.len() - 1].score.next_up(),
        frr: 1.0,
        far: 0.0,
    });
    Ok(points)
}

/// Equal error rate: first swept threshold where FRR reaches FAR, linearly
/// interpolated against the previous point.
pub fn compute_eer(trials: &[ScoredTrial]) -> Result<EerResult> {
    Ok(eer_from_points(&sweep(trials)?))
}

fn eer_from_points(points: &[RatePoint]) -> EerResult {
    // points[0] has FRR 0 and FAR 1; the sentinel has FRR 1 and FAR 0.
    let i = points
        .iter()
        .position(|p| p.frr >= p.far)
        .expect("sentinel point always has FRR >= FAR");
    if i == 0 {
        return EerResult {
            eer: points[0].far,
            threshold: points[0].threshold,
        };
    }
    let (a, b) = (points[i - 1], points[i]);
    let (da, db) = (a.far - a.frr, b.far - b.frr);
    let alpha = da / (da - db);
    EerResult {
        eer: a.far + alpha * (b.far - a.far),
        threshold: a.threshold + alpha * (b.threshold - a.threshold),
    }
}

/// Normalized minimum detection cost over all distinct scores and a sentinel
/// beyond each end.
pub fn compute_mindcf(trials: &[ScoredTrial], params: DcfParams) -> Result<DcfResult> {
    params.validate()?;
    let mut points = sweep(trials)?;
    // Accepting everything: same rates as the lowest score, kept explicit.
    let first = points[0];
    points.insert(
        0,
        RatePoint {
            threshold: first.threshold.next_down(),
            ..first
        },
    );
    let mut best: Option<(f64, f64)> = None;
    for p in &points {
        let cost =
            params.c_miss * params.p_target * p.frr + params.c_fa * (1.0 - params.p_target) * p.far;
        if best.is_none_or(|(c, _)| cost < c) {
            best = Some((cost, p.threshold));
        }
    }
    let (raw, threshold) = best.expect("sweep is never empty");
    Ok(DcfResult {
        min_dcf: raw / params.default_cost(),
        raw,
        threshold,
    })
}

/// Parses `score<TAB>label` lines, label 1 for target and 0 for nontarget.
/// Blank lines are skipped.
pub fn parse_score_file(text: &str) -> Result<Vec<ScoredTrial>> {
    let mut trials = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |why: &str| Error::format("score file", format!("line {}: {why}", n + 1));
        let mut fields = line.split('\t');
        let (Some(score), Some(label), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(bad("expected `score<TAB>label`"));
        };
        let score: f64 = score
            .trim()
            .parse()
            .map_err(|_| bad("score is not a number"))?;
        let target = match label.trim() {
            "1" => true,
            "0" => false,
            _ => return Err(bad("label must be 1 or 0")),
        };
        trials.push(ScoredTrial::new(score, target).map_err(|e| bad(&e.to_string()))?);
    }
    Ok(trials)
}

pub fn format_score_file(trials: &[ScoredTrial]) -> String {
    let mut out = String::new();
    for t in trials {
        writeln!(out, "{}\t{}", t.score, u8::from(t.target)).unwrap();
    }
    out
}
