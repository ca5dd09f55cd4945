//! Independent reference implementations the library is checked against.
#![allow(dead_code)]

use rand::Rng;
use repspk::metrics::{DcfParams, ScoredTrial};
use repspk::tensor::{Kernel, Tensor};

/// Direct convolution with explicit loops. Out-of-range taps read
/// `pad[channel]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &Tensor<f64>,
    w: &Kernel<f64>,
    bias: Option<&[f64]>,
    stride: (usize, usize),
    padding: (usize, usize),
    dilation: (usize, usize),
    pad: &[f64],
) -> Tensor<f64> {
    let [n, cin, h, wd] = x.shape();
    let (kh, kw) = w.size();
    let eh = dilation.0 * (kh - 1) + 1;
    let ew = dilation.1 * (kw - 1) + 1;
    let ho = (h + 2 * padding.0 - eh) / stride.0 + 1;
    let wo = (wd + 2 * padding.1 - ew) / stride.1 + 1;
    let cout = w.out_channels();
    Tensor::from_fn([n, cout, ho, wo], |b, o, i, j| {
        let mut acc = 0.0;
        for c in 0..cin {
            for u in 0..kh {
                for v in 0..kw {
                    let r = (i * stride.0 + u * dilation.0) as isize - padding.0 as isize;
                    let s = (j * stride.1 + v * dilation.1) as isize - padding.1 as isize;
                    let value = if r < 0 || s < 0 || r >= h as isize || s >= wd as isize {
                        pad[c]
                    } else {
                        x.at(b, c, r as usize, s as usize)
                    };
                    acc += w.at(o, c, u, v) * value;
                }
            }
        }
        acc + bias.map_or(0.0, |b| b[o])
    })
}

pub fn zeros(c: usize) -> Vec<f64> {
    vec![0.0; c]
}

pub fn random_tensor(rng: &mut impl Rng, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

pub fn random_kernel(rng: &mut impl Rng, o: usize, i: usize, size: (usize, usize)) -> Kernel<f64> {
    Kernel::from_fn(o, i, size, |_, _, _, _| rng.random_range(-1.0..1.0))
}

pub fn random_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Rates at a threshold, counted directly: (FRR, FAR) with accept iff
/// `score >= t`.
fn rates(trials: &[ScoredTrial], t: f64) -> (f64, f64) {
    let targets = trials.iter().filter(|x| x.target).count();
    let nontargets = trials.len() - targets;
    let missed = trials.iter().filter(|x| x.target && x.score < t).count();
    let accepted = trials.iter().filter(|x| !x.target && x.score >= t).count();
    (
        missed as f64 / targets as f64,
        accepted as f64 / nontargets as f64,
    )
}

fn distinct_scores(trials: &[ScoredTrial]) -> Vec<f64> {
    let mut s: Vec<f64> = trials.iter().map(|t| t.score).collect();
    s.sort_by(f64::total_cmp);
    s.dedup();
    s
}

/// EER by exhaustive sweep: every distinct score plus one threshold above
/// the maximum, first point where FRR ≥ FAR, linear interpolation against the
/// previous point.
pub fn brute_force_eer(trials: &[ScoredTrial]) -> f64 {
    let mut thresholds = distinct_scores(trials);
    thresholds.push(thresholds[thresholds.len() - 1].next_up());
    let pts: Vec<(f64, f64)> = thresholds.iter().map(|&t| rates(trials, t)).collect();
    let i = pts.iter().position(|&(frr, far)| frr >= far).unwrap();
    if i == 0 {
        return pts[0].1;
    }
    let (a, b) = (pts[i - 1], pts[i]);
    let (da, db) = (a.1 - a.0, b.1 - b.0);
    let alpha = da / (da - db);
    a.1 + alpha * (b.1 - a.1)
}

/// Normalized minDCF by exhaustive sweep over distinct scores and one
/// sentinel beyond each end.
pub fn brute_force_mindcf(trials: &[ScoredTrial], p: DcfParams) -> f64 {
    let scores = distinct_scores(trials);
    let mut thresholds = vec![scores[0].next_down()];
    thresholds.extend(&scores);
    thresholds.push(scores[scores.len() - 1].next_up());
    let best = thresholds
        .iter()
        .map(|&t| {
            let (frr, far) = rates(trials, t);
            p.c_miss * p.p_target * frr + p.c_fa * (1.0 - p.p_target) * far
        })
        .fold(f64::INFINITY, f64::min);
    best / (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target))
}

/// Double-double number `hi + lo`, about 106 bits of precision.
#[derive(Clone, Copy, Debug)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    Dd {
        hi: s,
        lo: (a - (s - bb)) + (b - bb),
    }
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd {
        hi: s,
        lo: b - (s - a),
    }
}

fn two_prod(a: f64, b: f64) -> Dd {
    let p = a * b;
    Dd {
        hi: p,
        lo: a.mul_add(b, -p),
    }
}

impl Dd {
    pub fn from(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn add(self, o: Dd) -> Dd {
        let s = two_sum(self.hi, o.hi);
        let t = two_sum(self.lo, o.lo);
        let v = quick_two_sum(s.hi, s.lo + t.hi);
        quick_two_sum(v.hi, v.lo + t.lo)
    }

    pub fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let p = two_prod(self.hi, o.hi);
        quick_two_sum(p.hi, p.lo + (self.hi * o.lo + self.lo * o.hi))
    }

    pub fn mul_f(self, f: f64) -> Dd {
        let p = two_prod(self.hi, f);
        quick_two_sum(p.hi, p.lo + self.lo * f)
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul_f(q1));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul_f(q2));
        let q3 = r.hi / o.hi;
        quick_two_sum(q1, q2).add(Dd::from(q3))
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn ldexp(self, k: i32) -> Dd {
        let f = 2f64.powi(k);
        Dd {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }

    /// ln 2 to double-double precision.
    fn ln2() -> Dd {
        Dd {
            hi: std::f64::consts::LN_2,
            lo: 2.319_046_813_846_299_6e-17,
        }
    }

    pub fn exp(self) -> Dd {
        if self.hi < -745.0 {
            return Dd::from(0.0);
        }
        let k = (self.hi / std::f64::consts::LN_2).round();
        let r = self.sub(Dd::ln2().mul_f(k)).ldexp(-10);
        // Taylor series for |r| < 2^-10 · ln2/2 converges in a few terms.
        let mut term = Dd::from(1.0);
        let mut sum = Dd::from(1.0);
        for n in 1..=20 {
            term = term.mul(r).div(Dd::from(n as f64));
            sum = sum.add(term);
            if term.hi.abs() < 1e-40 {
                break;
            }
        }
        for _ in 0..10 {
            sum = sum.mul(sum);
        }
        sum.ldexp(k as i32)
    }

    pub fn ln(self) -> Dd {
        // Two Newton steps on exp(y) = x from the f64 estimate.
        let mut y = Dd::from(self.hi.ln());
        for _ in 0..2 {
            y = y.add(self.mul(y.neg().exp())).sub(Dd::from(1.0));
        }
        y
    }
}

/// Mean AM-Softmax loss evaluated in double-double arithmetic from the
/// textbook form `−log(e^{z_y} / Σ_j e^{z_j})`, with `z_y = s(cos_y − m)`
/// and `z_j = s·cos_j` otherwise.
pub fn am_softmax_dd(cosines: &[f64], classes: usize, labels: &[usize], s: f64, m: f64) -> f64 {
    let mut total = Dd::from(0.0);
    for (row, &y) in cosines.chunks_exact(classes).zip(labels) {
        let logits: Vec<Dd> = row
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                if j == y {
                    Dd::from(c).sub(Dd::from(m)).mul_f(s)
                } else {
                    two_prod(s, c)
                }
            })
            .collect();
        let peak = logits
            .iter()
            .map(|z| z.hi)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum = logits
            .iter()
            .fold(Dd::from(0.0), |acc, z| acc.add(z.sub(Dd::from(peak)).exp()));
        let lse = Dd::from(peak).add(sum.ln());
        total = total.add(lse.sub(logits[y]));
    }
    total.div(Dd::from(labels.len() as f64)).to_f64()
}
