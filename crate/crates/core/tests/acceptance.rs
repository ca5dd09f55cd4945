//! Acceptance suite: runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each. Exits non-zero if any criterion fails.

mod support;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use repspk::blocks::{
    forward_inference, make_block, BlockVariant, Branch, ConvBn, InitPolicy, RepBlock,
};
use repspk::commands::{bench_model, verify_models};
use repspk::io::manifest::{load_model, save_model, Provenance};
use repspk::metrics::{compute_eer, compute_mindcf, DcfParams, ScoredTrial};
use repspk::network::{am_softmax_loss, branch_similarity, Arch, Model, ModelConfig};
use repspk::reparam::{
    avgpool_to_conv, dilate_to_dense, fuse_block, fuse_conv_bn, fuse_sequential, identity_to_conv,
    merge_parallel,
};
use repspk::tensor::{conv2d, relative_linf, BnParams, ConvSpec, Kernel, Tensor};

use support::*;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn block_fusion_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut draws = 0;
    for variant in BlockVariant::ALL {
        for (cin, cout) in [(1, 1), (3, 3), (3, 8), (8, 8)] {
            for stride in [1, 2] {
                for _ in 0..50 {
                    let block: RepBlock<f64> = make_block(
                        variant,
                        cin,
                        cout,
                        (stride, stride),
                        InitPolicy::RandomStats,
                        &mut rng,
                    )
                    .map_err(err)?;
                    let fused = fuse_block(&block).map_err(err)?;
                    let x = random_tensor(&mut rng, [2, cin, 9, 11]);
                    let reference = block.forward_train(&x).map_err(err)?;
                    let candidate = forward_inference(&fused, &x).map_err(err)?;
                    if reference.shape() != candidate.shape() {
                        return Err(format!("{variant} {cin}->{cout} s{stride}: shape mismatch"));
                    }
                    let e = relative_linf(reference.data(), candidate.data());
                    if e > 1e-9 {
                        return Err(format!(
                            "{variant} {cin}->{cout} s{stride}: error {e:.3e} > 1e-9"
                        ));
                    }
                    worst = worst.max(e);
                    draws += 1;
                }
            }
        }
    }
    Ok(format!("{draws} draws, max rel error {worst:.3e} <= 1e-9"))
}

fn model_fusion_exactness() -> Outcome {
    let variants = [
        BlockVariant::RepVgg,
        BlockVariant::VarD,
        BlockVariant::Rsba,
        BlockVariant::VarF,
        BlockVariant::Rsbb,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    for variant in variants {
        let config = ModelConfig::new(Arch::Toy, variant);
        let seed = rng.random();
        let m64: Model<f64> =
            Model::build(config.clone(), seed, InitPolicy::RandomStats).map_err(err)?;
        let m32: Model<f32> = Model::build(config, seed, InitPolicy::RandomStats).map_err(err)?;
        let (f64m, f32m) = (m64.fuse().map_err(err)?, m32.fuse().map_err(err)?);
        for _ in 0..20 {
            let frames = rng.random_range(16..=200);
            let x = random_tensor(&mut rng, [1, 1, 16, frames]);
            let a = m64.embed(&x).map_err(err)?;
            let b = f64m.embed(&x).map_err(err)?;
            worst64 = worst64.max(relative_linf(&a[0].values, &b[0].values));
            let x32 = x.cast::<f32>();
            let a = m32.embed(&x32).map_err(err)?;
            let b = f32m.embed(&x32).map_err(err)?;
            worst32 = worst32.max(relative_linf(&a[0].values, &b[0].values));
        }
    }
    check(
        worst64 <= 1e-9 && worst32 <= 1e-4,
        format!("5 variants x 20 utterances: double {worst64:.3e} <= 1e-9, single {worst32:.3e} <= 1e-4"),
    )
}

fn random_bn(rng: &mut ChaCha8Rng, c: usize) -> BnParams<f64> {
    InitPolicy::RandomStats.bn(rng, c)
}

fn odd_size(rng: &mut ChaCha8Rng) -> (usize, usize) {
    [(1, 1), (3, 3), (1, 3), (3, 1), (5, 5), (3, 5)][rng.random_range(0..6)]
}

fn transformation_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = [0.0f64; 6];
    for _ in 0..100 {
        let (ci, co) = (rng.random_range(1..6), rng.random_range(1..6));
        let stride = (rng.random_range(1..3), rng.random_range(1..3));
        let shape = [
            rng.random_range(1..3),
            ci,
            rng.random_range(5..10),
            rng.random_range(5..10),
        ];
        let x = random_tensor(&mut rng, shape);

        // conv -> BN
        let k = odd_size(&mut rng);
        let pad = ((k.0 - 1) / 2, (k.1 - 1) / 2);
        let w = random_kernel(&mut rng, co, ci, k);
        let bn = random_bn(&mut rng, co);
        let y = naive_conv(&x, &w, None, stride, pad, (1, 1), &zeros(ci));
        let oracle = Tensor::from_fn(y.shape(), |n, c, i, j| {
            (y.at(n, c, i, j) - bn.mean[c]) / (bn.var[c] + bn.epsilon).sqrt() * bn.gamma[c]
                + bn.beta[c]
        });
        let (wf, bf) = fuse_conv_bn(&w, &bn).map_err(err)?;
        let got = conv2d(
            &x,
            &ConvSpec::new(wf)
                .with_bias(bf)
                .with_stride(stride)
                .with_padding(pad),
        )
        .map_err(err)?;
        worst[0] = worst[0].max(relative_linf(oracle.data(), got.data()));

        // 1×1 then k×k, second stage padded with the first stage's bias
        let mid = rng.random_range(1..6);
        let (w1, b1) = (
            random_kernel(&mut rng, mid, ci, (1, 1)),
            random_vec(&mut rng, mid, -1.0, 1.0),
        );
        let (w2, b2) = (
            random_kernel(&mut rng, co, mid, k),
            random_vec(&mut rng, co, -1.0, 1.0),
        );
        let y1 = naive_conv(&x, &w1, Some(&b1), (1, 1), (0, 0), (1, 1), &zeros(ci));
        let oracle = naive_conv(&y1, &w2, Some(&b2), stride, pad, (1, 1), &b1);
        let (ws, bs) = fuse_sequential((&w1, &b1), (&w2, &b2)).map_err(err)?;
        let got = conv2d(
            &x,
            &ConvSpec::new(ws)
                .with_bias(bs)
                .with_stride(stride)
                .with_padding(pad),
        )
        .map_err(err)?;
        worst[1] = worst[1].max(relative_linf(oracle.data(), got.data()));

        // average pooling with zero-counted padding
        let pk = [(3, 3), (1, 3), (5, 5), (2, 2)][rng.random_range(0..4)];
        let ppad = (
            rng.random_range(0..=pk.0 / 2),
            rng.random_range(0..=pk.1 / 2),
        );
        let [n, _, h, wd] = x.shape();
        let (ho, wo) = (
            (h + 2 * ppad.0 - pk.0) / stride.0 + 1,
            (wd + 2 * ppad.1 - pk.1) / stride.1 + 1,
        );
        let oracle = Tensor::from_fn([n, ci, ho, wo], |b, c, i, j| {
            let mut s = 0.0;
            for u in 0..pk.0 {
                for v in 0..pk.1 {
                    let (r, q) = (
                        (i * stride.0 + u) as isize - ppad.0 as isize,
                        (j * stride.1 + v) as isize - ppad.1 as isize,
                    );
                    if r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < wd {
                        s += x.at(b, c, r as usize, q as usize);
                    }
                }
            }
            s / (pk.0 * pk.1) as f64
        });
        let got = conv2d(
            &x,
            &ConvSpec::new(avgpool_to_conv(ci, pk))
                .with_stride(stride)
                .with_padding(ppad),
        )
        .map_err(err)?;
        worst[2] = worst[2].max(relative_linf(oracle.data(), got.data()));

        // dilation expanded to a dense kernel
        let dil = (rng.random_range(1..4), rng.random_range(1..4));
        let wk = random_kernel(&mut rng, co, ci, (3, 3));
        let dpad = (dil.0, dil.1);
        let oracle = naive_conv(&x, &wk, None, stride, dpad, dil, &zeros(ci));
        let got = conv2d(
            &x,
            &ConvSpec::new(dilate_to_dense(&wk, dil))
                .with_stride(stride)
                .with_padding(dpad),
        )
        .map_err(err)?;
        worst[3] = worst[3].max(relative_linf(oracle.data(), got.data()));

        // identity
        let got = conv2d(
            &x,
            &ConvSpec::new(identity_to_conv(ci, k).map_err(err)?).with_padding(pad),
        )
        .map_err(err)?;
        worst[4] = worst[4].max(relative_linf(x.data(), got.data()));

        // parallel branches of mixed sizes
        let count = rng.random_range(2..5);
        let branches: Vec<(Kernel<f64>, Vec<f64>)> = (0..count)
            .map(|_| {
                let s = odd_size(&mut rng);
                (
                    random_kernel(&mut rng, co, ci, s),
                    random_vec(&mut rng, co, -1.0, 1.0),
                )
            })
            .collect();
        let target = branches.iter().fold((1, 1), |t, (w, _)| {
            (t.0.max(w.size().0), t.1.max(w.size().1))
        });
        let mut sum: Option<Tensor<f64>> = None;
        for (w, b) in &branches {
            let p = ((w.size().0 - 1) / 2, (w.size().1 - 1) / 2);
            let y = naive_conv(&x, w, Some(b), stride, p, (1, 1), &zeros(ci));
            sum = Some(match sum {
                None => y,
                Some(acc) => Tensor::from_fn(acc.shape(), |a, c, i, j| {
                    acc.at(a, c, i, j) + y.at(a, c, i, j)
                }),
            });
        }
        let (wm, bm) = merge_parallel(&branches, target).map_err(err)?;
        let got = conv2d(
            &x,
            &ConvSpec::new(wm)
                .with_bias(bm)
                .with_stride(stride)
                .with_padding(((target.0 - 1) / 2, (target.1 - 1) / 2)),
        )
        .map_err(err)?;
        worst[5] = worst[5].max(relative_linf(sum.unwrap().data(), got.data()));
    }
    let names = [
        "fuse_conv_bn",
        "fuse_sequential",
        "avgpool_to_conv",
        "dilate_to_dense",
        "identity_to_conv",
        "merge_parallel",
    ];
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(
        worst.iter().all(|&e| e <= 1e-12),
        format!("100 cases each <= 1e-12: {detail}"),
    )
}

fn dilated_kernel_theorem() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for case in 0..100 {
        let (ci, co) = (rng.random_range(1..8), rng.random_range(1..8));
        let stride = rng.random_range(1..3);
        let shape = [
            rng.random_range(1..3),
            ci,
            rng.random_range(5..12),
            rng.random_range(5..12),
        ];
        let x = random_tensor(&mut rng, shape);
        let w = random_kernel(&mut rng, co, ci, (3, 3));
        let dilated = ConvSpec::new(w.clone())
            .with_dilation((2, 2))
            .with_padding((2, 2))
            .with_stride((stride, stride));
        let dense = ConvSpec::new(dilate_to_dense(&w, (2, 2)))
            .with_padding((2, 2))
            .with_stride((stride, stride));
        if dense.weight.size() != (5, 5) {
            return Err(format!(
                "case {case}: expanded kernel is {:?}",
                dense.weight.size()
            ));
        }
        let a = conv2d(&x, &dilated).map_err(err)?;
        let b = conv2d(&x, &dense).map_err(err)?;
        let same = a.shape() == b.shape()
            && a.data()
                .iter()
                .zip(b.data())
                .all(|(p, q)| p.to_bits() == q.to_bits());
        if !same {
            return Err(format!("case {case}: outputs differ"));
        }
    }
    Ok("100 cases, 3x3 dilation-2 == 5x5 dense bit for bit".into())
}

fn random_trials(rng: &mut ChaCha8Rng, n: usize) -> Vec<ScoredTrial> {
    let p_target = rng.random_range(0.05..0.95);
    let separation = rng.random_range(0.0..3.0);
    let decimals = [None, Some(1), Some(2), Some(3)][rng.random_range(0..4)];
    let mut trials: Vec<ScoredTrial> = (0..n)
        .map(|_| {
            let target = rng.random_bool(p_target);
            let noise: f64 = (0..4).map(|_| rng.random_range(-1.0..1.0)).sum();
            let mut score = noise + if target { separation } else { 0.0 };
            if let Some(d) = decimals {
                let f = 10f64.powi(d);
                score = (score * f).round() / f;
            }
            ScoredTrial { score, target }
        })
        .collect();
    trials[0].target = true;
    trials[1].target = false;
    trials
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut largest = 0;
    for case in 0..200 {
        let n = match case {
            0 => 2,
            1 => 10_000,
            _ => (2f64.ln() + rng.random_range(0.0..1.0) * (5000f64).ln())
                .exp()
                .round() as usize,
        }
        .clamp(2, 10_000);
        largest = largest.max(n);
        let trials = random_trials(&mut rng, n);
        let params = if case % 4 == 3 {
            DcfParams {
                p_target: rng.random_range(0.001..0.5),
                c_fa: rng.random_range(0.5..10.0),
                c_miss: rng.random_range(0.5..10.0),
            }
        } else {
            DcfParams::default()
        };
        let eer = compute_eer(&trials).map_err(err)?.eer;
        let dcf = compute_mindcf(&trials, params).map_err(err)?.min_dcf;
        let (oe, od) = (
            brute_force_eer(&trials),
            brute_force_mindcf(&trials, params),
        );
        if eer != oe || dcf != od {
            return Err(format!(
                "case {case} (n={n}): eer {eer} vs {oe}, mindcf {dcf} vs {od}"
            ));
        }
        if !(0.0..=1.0).contains(&eer)
            || (params == DcfParams::default() && !(0.0..=1.0).contains(&dcf))
        {
            return Err(format!("case {case}: metric out of range"));
        }
    }

    type Transform = fn(f64) -> f64;
    let transforms: [(&str, Transform); 4] = [
        ("affine", |x| 3.0 * x + 1.0),
        ("exp", f64::exp),
        ("atan", f64::atan),
        ("cubic", |x| x * x * x + x),
    ];
    let distinct = |t: &[ScoredTrial]| {
        let mut s: Vec<u64> = t.iter().map(|x| x.score.to_bits()).collect();
        s.sort_unstable();
        s.dedup();
        s.len()
    };
    let mut checked = 0;
    let mut case = 0;
    while checked < 50 {
        case += 1;
        let n = rng.random_range(2..2000);
        let trials = random_trials(&mut rng, n);
        // A transform that is strictly increasing on the reals can still
        // round neighbouring floats together; use the first that does not.
        let Some((name, mapped)) = (0..transforms.len())
            .map(|k| transforms[(case + k) % transforms.len()])
            .map(|(name, f)| {
                (
                    name,
                    trials
                        .iter()
                        .map(|t| ScoredTrial {
                            score: f(t.score),
                            ..*t
                        })
                        .collect::<Vec<_>>(),
                )
            })
            .find(|(_, mapped)| distinct(mapped) == distinct(&trials))
        else {
            continue;
        };
        let p = DcfParams::default();
        let (a, b) = (
            compute_eer(&trials).map_err(err)?,
            compute_eer(&mapped).map_err(err)?,
        );
        let (c, d) = (
            compute_mindcf(&trials, p).map_err(err)?,
            compute_mindcf(&mapped, p).map_err(err)?,
        );
        if a.eer != b.eer || c.min_dcf != d.min_dcf {
            return Err(format!(
                "invariance case {case} ({name}): {} vs {}, {} vs {}",
                a.eer, b.eer, c.min_dcf, d.min_dcf
            ));
        }
        checked += 1;
    }
    Ok(format!(
        "200 sets (2..={largest} trials) equal brute force exactly; {checked} invariance cases"
    ))
}

fn am_softmax_check() -> Outcome {
    let closed = am_softmax_loss(&[1.0, 0.0], 2, &[0], 36.0, 0.2).map_err(err)?;
    let expected = (-28.8f64).exp().ln_1p();
    let closed_err = ((closed - expected) / expected).abs();
    if closed_err > 1e-9 {
        return Err(format!("closed form {closed:e} vs {expected:e}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, c) = (rng.random_range(1..=32), rng.random_range(2..=64));
        let cosines = random_vec(&mut rng, n * c, -1.0, 1.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let (s, m) = if rng.random_bool(0.5) {
            (36.0, 0.2)
        } else {
            (rng.random_range(1.0..64.0), rng.random_range(0.0..0.5))
        };
        let got = am_softmax_loss(&cosines, c, &labels, s, m).map_err(err)?;
        let oracle = am_softmax_dd(&cosines, c, &labels, s, m);
        worst = worst.max(((got - oracle) / oracle).abs());
    }
    check(
        worst <= 1e-6,
        format!("100 instances max rel error {worst:.1e} <= 1e-6; closed form rel error {closed_err:.1e} <= 1e-9"),
    )
}

fn efficiency() -> Outcome {
    let three_by_three: Vec<BlockVariant> = BlockVariant::ALL
        .into_iter()
        .filter(|v| v.fused_kernel() == (3, 3))
        .collect();
    let mut gated = 0;
    let mut notes = Vec::new();
    for arch in [Arch::A0, Arch::Toy] {
        for variant in BlockVariant::ALL {
            let model: Model<f32> =
                Model::build(ModelConfig::new(arch, variant), 1, InitPolicy::Standard)
                    .map_err(err)?;
            let fused = model.fuse().map_err(err)?;
            let (train, fast) = (
                model.block_flops(200).map_err(err)?,
                fused.block_flops(200).map_err(err)?,
            );
            let all_less = train.iter().zip(&fast).all(|(t, f)| f < t);
            if three_by_three.contains(&variant) {
                if !all_less {
                    return Err(format!(
                        "{arch} {variant}: a fused block does not save flops"
                    ));
                }
                gated += 1;
            } else {
                let ratio = fast.iter().sum::<u64>() as f64 / train.iter().sum::<u64>() as f64;
                notes.push(format!("{arch}/{variant} 5x5 fused flop ratio {ratio:.2}"));
            }
        }
    }
    let toy: Model<f64> = Model::build(
        ModelConfig::new(Arch::Toy, BlockVariant::RepVgg),
        1,
        InitPolicy::Standard,
    )
    .map_err(err)?;
    let start = Instant::now();
    let report = bench_model(&toy, "repvgg", 200, 5).map_err(err)?;
    let elapsed = start.elapsed().as_secs_f64();
    let (t, f) = (
        report.train_seconds_median.unwrap_or(f64::NAN),
        report.fused_seconds_median,
    );
    Ok(format!(
        "{gated} arch/variant pairs with 3x3 fused kernels save flops in every block; {}; \
         toy repvgg 200 frames median train {:.2} ms, fused {:.2} ms ({}, report only; bench took {elapsed:.2} s)",
        notes.join(", "),
        t * 1e3,
        f * 1e3,
        if f <= t { "fused not slower" } else { "fused slower on this host" },
    ))
}

fn branch_similarity_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let (mut worst_same, mut worst_neg) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let c = rng.random_range(1..6);
        let block: RepBlock<f64> = make_block(
            BlockVariant::VarA,
            c,
            c,
            (1, 1),
            InitPolicy::RandomStats,
            &mut rng,
        )
        .map_err(err)?;
        let main = match &block.branches()[0] {
            Branch::ConvBn(u) => u.clone(),
            _ => return Err("main branch is not conv-bn".into()),
        };
        let mut negated = main.clone();
        negated
            .conv
            .weight
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = -*w);
        negated.bn.mean.iter_mut().for_each(|m| *m = -*m);
        negated.bn.beta.iter_mut().for_each(|b| *b = -*b);
        let x = random_tensor(&mut rng, [2, c, 7, 9]);
        for (copy, sign) in [(main.clone(), 1.0), (negated, -1.0)] {
            let mut branches = vec![
                Branch::ConvBn(main.clone()),
                Branch::ConvBn(ConvBn::new(copy.conv, copy.bn).map_err(err)?),
            ];
            branches.extend(block.branches().iter().skip(2).cloned());
            let dup = RepBlock::new(c, c, (1, 1), branches).map_err(err)?;
            let sim = branch_similarity(&dup, &x).map_err(err)?;
            let s = sim[0].ok_or("similarity undefined")?;
            let dev = (s - sign).abs();
            if sign > 0.0 {
                worst_same = worst_same.max(dev);
            } else {
                worst_neg = worst_neg.max(dev);
            }
        }
    }
    check(
        worst_same <= 1e-6 && worst_neg <= 1e-6,
        format!(
            "duplicated branch 1.0 +- {worst_same:.1e}, negated branch -1.0 +- {worst_neg:.1e}"
        ),
    )
}

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_repspk"))
        .args(args)
        .output()
        .map_err(err)?;
    if !out.status.success() {
        return Err(format!(
            "`repspk {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn serialization_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let path = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let read = |p: &Path| std::fs::read(p).map_err(err);
    let mut worst = 0.0f64;
    for variant in ["repvgg", "var_e", "rsba", "rsbb"] {
        let (a, b, f) = (
            path(&format!("{variant}-a")),
            path(&format!("{variant}-b")),
            path(&format!("{variant}-f")),
        );
        for out in [&a, &b] {
            cli(&[
                "build",
                "--arch",
                "toy",
                "--variant",
                variant,
                "--seed",
                "7",
                "--init",
                "random-bn",
                "--out",
                out,
            ])?;
        }
        for file in ["weights.rspk", "manifest.json"] {
            if read(&Path::new(&a).join(file))? != read(&Path::new(&b).join(file))? {
                return Err(format!(
                    "{variant}: {file} differs between two builds with one seed"
                ));
            }
        }
        cli(&["fuse", &a, "--out", &f])?;
        let report = cli(&["verify", &a, &f, "--trials", "5"])?;
        if !report.contains("PASS") {
            return Err(format!("{variant}: verify did not pass:\n{report}"));
        }

        let built: Model<f64> = Model::build(
            ModelConfig::new(Arch::Toy, variant.parse().map_err(err)?),
            7,
            InitPolicy::RandomStats,
        )
        .map_err(err)?;
        let (_, loaded) = load_model::<f64>(Path::new(&a)).map_err(err)?;
        if loaded != built {
            return Err(format!(
                "{variant}: loaded model differs from the built one"
            ));
        }
        let lib_dir = dir.path().join(format!("{variant}-lib"));
        save_model(
            &loaded,
            &lib_dir,
            &Provenance {
                seed: Some(7),
                init: Some("random-bn".into()),
                source_parameter_count: None,
            },
        )
        .map_err(err)?;
        if read(&lib_dir.join("weights.rspk"))? != read(&Path::new(&a).join("weights.rspk"))? {
            return Err(format!("{variant}: re-saved weights differ"));
        }
        let (_, fused) = load_model::<f64>(Path::new(&f)).map_err(err)?;
        let r = verify_models(&loaded, &fused, 5, 1e-9, 3).map_err(err)?;
        if !r.passed() {
            return Err(format!("{variant}: round-tripped models fail verification"));
        }
        worst = r
            .block_errors
            .iter()
            .fold(worst.max(r.end_to_end_error), |a, &b| a.max(b));
    }
    Ok(format!("4 toy variants: builds byte-identical, write/read/verify max rel error {worst:.1e} <= 1e-9"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("fusion exactness, block level", block_fusion_exactness),
        ("fusion exactness, model level", model_fusion_exactness),
        ("transformation unit oracles", transformation_oracles),
        (
            "dilated kernel equals dense expansion",
            dilated_kernel_theorem,
        ),
        ("EER/minDCF brute-force oracle", metrics_oracle),
        ("AM-Softmax extended-precision check", am_softmax_check),
        ("fused flops below training-state flops", efficiency),
        ("branch similarity sanity", branch_similarity_sanity),
        ("serialization round trip", serialization_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {}: {tag}: {name}: {detail} [{secs:.1} s]", i + 1);
        failed += usize::from(outcome.is_err());
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
