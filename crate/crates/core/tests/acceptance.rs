//! Acceptance suite: one pass/fail line per criterion.

use std::process::ExitCode;
use std::time::Instant;

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pnl::costmodel::{
    cost_nl, cost_nl_embs, cost_pnl_dep, instrument_nl_block, instrument_pnl, mac_exact_nl, mac_exact_pnl,
};
use pnl::fcomb::{attend, attention_weights, make_stack};
use pnl::gradcheck::{check_attend, check_nl_block, check_pnl};
use pnl::nonlocal::{brute_force_oracle, nl_operation, param_count_nl};
use pnl::pnl::{attention_map_extract, param_count_pnl};
use pnl::train::{evaluate, backbone_shape, train_eval, BlockChoice, Dataset, Model, Split, SynthTask, BATCH, EPOCHS};
use pnl::verify::composed_oracle;
use pnl::{CombMode, DType, FcombParams, Matrix, NonLocalParams, PairwiseKind, PnlConfig, PnlModule, PoolMode, Shape5, VideoFeature};

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: Shape5, seed: u64) -> VideoFeature {
    VideoFeature::random_uniform(shape, -1.0, 1.0, &mut rng(seed))
}

fn max_abs(a: &VideoFeature, b: &VideoFeature) -> f64 {
    a.max_abs_diff(b)
}

fn randomized_module(c: usize, cfg: PnlConfig, seed: u64, w_z_bound: f64, attn_bound: f64) -> PnlModule {
    let mut m = PnlModule::init(c, cfg, seed).unwrap();
    let mut r = rng(seed ^ 0xabc);
    m.shared.randomize_w_z(w_z_bound, &mut r);
    if cfg.comb == CombMode::ScaledDotAttention {
        m.comb = FcombParams::random_attention(cfg.c_prime(c), attn_bound, &mut r);
    }
    m
}

fn criterion_1() -> Outcome {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    let configs = 24;
    for i in 0..configs {
        let kind = PairwiseKind::ALL[i % 4];
        let shape = Shape5::new(1, r.gen_range(1..=4), r.gen_range(1..=8), r.gen_range(1..=8), 2 * r.gen_range(1..=8)).unwrap();
        let x = uniform(shape, i as u64);
        let p = NonLocalParams::init(shape.c, kind, 100 + i as u64).unwrap();
        let d = max_abs(&nl_operation(&x, &p).unwrap(), &brute_force_oracle(&x, &p).unwrap());
        worst = worst.max(d);
    }
    if worst <= 1e-10 {
        Ok(format!("{configs} configs, max |diff| {worst:.2e} <= 1e-10"))
    } else {
        Err(format!("max |diff| {worst:.2e} > 1e-10"))
    }
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    let mut runs = 0;
    for (n, c) in [(2, 8), (3, 12), (4, 16)] {
        for comb in [CombMode::VanillaConcat, CombMode::ScaledDotAttention] {
            for (j, kind) in PairwiseKind::ALL.into_iter().enumerate() {
                let cfg = PnlConfig::basic(n, kind, comb).unwrap();
                let m = randomized_module(c, cfg, (n * 10 + j) as u64, 1.0, 1.0);
                let x = uniform(Shape5::new(1, 2, 8, 8, c).unwrap(), n as u64);
                worst = worst.max(max_abs(&m.forward(&x).unwrap(), &composed_oracle(&x, &m).unwrap()));
                runs += 1;
            }
        }
    }
    if worst <= 1e-10 {
        Ok(format!("{runs} configs over n in {{2,3,4}} and both comb modes, max |diff| {worst:.2e}"))
    } else {
        Err(format!("max |diff| {worst:.2e} > 1e-10"))
    }
}

fn criterion_3() -> Outcome {
    let mut r = rng(3);
    let configs = 64;
    for i in 0..configs {
        let n = r.gen_range(2..=4);
        let kind = PairwiseKind::ALL[r.gen_range(0..4)];
        let comb = if r.gen() { CombMode::VanillaConcat } else { CombMode::ScaledDotAttention };
        let pool = if r.gen() { PoolMode::Average } else { PoolMode::Max };
        let dtype = if r.gen() { DType::F64 } else { DType::F32 };
        let c = 2 * n * r.gen_range(1..=3);
        let side = (1 << (n - 1)) * r.gen_range(1..=2);
        let shape = Shape5::new(r.gen_range(1..=2), r.gen_range(1..=3), side, side, c).unwrap();
        let cfg = PnlConfig::new(n, kind, comb, pool, dtype).unwrap();
        let m = PnlModule::init(c, cfg, i).unwrap();
        let x = uniform(shape, 1000 + i).cast(dtype);
        if !m.forward(&x).unwrap().bitwise_eq(&x) {
            return Err(format!("config {i} (n={n}, {kind}, {comb}, {pool}, {dtype:?}) is not the identity"));
        }
    }
    Ok(format!("{configs} configs, output == input bitwise"))
}

fn criterion_4() -> Outcome {
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    let mut tensors = 0;
    let mut record = |label: String, reports: Vec<pnl::gradcheck::GradReport>| {
        for rep in reports {
            tensors += 1;
            worst = worst.max(rep.relative_error);
            if !rep.passed() {
                failed.push(format!("{label}/{}={:.2e}", rep.name, rep.relative_error));
            }
        }
    };
    let x = uniform(Shape5::new(1, 2, 4, 4, 4).unwrap(), 40);
    for kind in PairwiseKind::ALL {
        let mut p = NonLocalParams::init(4, kind, 41).unwrap();
        p.randomize_w_z(1.0, &mut rng(42));
        record(format!("nl_block[{kind}]"), check_nl_block(&x, &p, 43).unwrap());
    }
    for (n, c, side) in [(2, 8, 4), (3, 12, 4), (4, 16, 8)] {
        for comb in [CombMode::VanillaConcat, CombMode::ScaledDotAttention] {
            for kind in PairwiseKind::ALL {
                let cfg = PnlConfig::basic(n, kind, comb).unwrap();
                // Scale attention only sees spatiotemporal means. A nonnegative input and a
                // large w_z lift its gradients far above finite-difference roundoff; the
                // small projection bound keeps the softmax away from saturation.
                let m = randomized_module(c, cfg, 44, 10.0, 0.3);
                let x = VideoFeature::random_uniform(Shape5::new(1, 2, side, side, c).unwrap(), 0.0, 2.0, &mut rng(45));
                record(format!("pnl[n={n},{kind},{comb}]"), check_pnl(&x, &m, 46).unwrap());
            }
        }
    }
    let mut r = rng(47);
    let shape = Shape5::new(2, 2, 2, 2, 3).unwrap();
    let aligned: Vec<VideoFeature> = (0..3).map(|_| VideoFeature::random_uniform(shape, -1.0, 1.0, &mut r)).collect();
    let wq = Matrix::random_uniform(3, 3, -1.0, 1.0, &mut r);
    let wk = Matrix::random_uniform(3, 3, -1.0, 1.0, &mut r);
    record("attend".into(), check_attend(&aligned, wq.data(), wk.data(), 48).unwrap());
    if failed.is_empty() {
        Ok(format!("{tensors} tensors (inputs and parameters), worst relative error {worst:.2e} < 1e-4"))
    } else {
        Err(format!("{} tensors over 1e-4: {}", failed.len(), failed.join(" ")))
    }
}

fn criterion_5() -> Outcome {
    let q = |a: i64, b: i64| BigRational::new(BigInt::from(a), BigInt::from(b));
    let mut points = 0;
    for c in 1..=100u64 {
        for n in 1..=100u64 {
            let nl = cost_nl(c, n);
            let costs: Vec<BigRational> = (2..=4).map(|s| cost_pnl_dep(c, n, s)).collect();
            let cn2 = BigRational::from_integer(BigInt::from(c) * BigInt::from(n) * BigInt::from(n));
            let quoted = q(5, 32) * cost_nl_embs(c, n) + q(17, 32) * cn2;
            if costs[0] != quoted {
                return Err(format!("(C={c}, N={n}): n=2 cost {} != 5/32*2C^3N + 17/32*CN^2", costs[0]));
            }
            if costs.iter().any(|v| *v >= nl) {
                return Err(format!("(C={c}, N={n}): some pyramid cost is not below the non-local cost"));
            }
            if costs[1] >= costs[0] || costs[2] >= costs[0] {
                return Err(format!("(C={c}, N={n}): n=2 is not the maximum over {{2,3,4}}"));
            }
            points += 1;
        }
    }
    Ok(format!("{points} (C,N) points, exact rational equality and orderings"))
}

fn criterion_6() -> Outcome {
    let shapes = [
        (1, 2, 4, 4, 8),
        (1, 1, 8, 8, 8),
        (2, 2, 4, 4, 16),
        (1, 4, 8, 8, 16),
        (1, 2, 8, 8, 24),
        (2, 1, 8, 8, 24),
        (1, 3, 8, 8, 48),
        (1, 2, 16, 16, 16),
        (1, 1, 16, 8, 32),
        (1, 2, 8, 16, 48),
        (1, 8, 8, 8, 24),
    ];
    let mut nl_runs = 0;
    let mut pnl_runs = 0;
    for (i, &(b, t, h, w, c)) in shapes.iter().enumerate() {
        let shape = Shape5::new(b, t, h, w, c).unwrap();
        let x = uniform(shape, 60 + i as u64);
        let kind = PairwiseKind::ALL[i % 4];
        let p = NonLocalParams::init(c, kind, 61).unwrap();
        let (_, counted) = instrument_nl_block(&x, &p).unwrap();
        let nl_exact = mac_exact_nl(shape, kind);
        if counted.total() != nl_exact {
            return Err(format!("NL {shape} {kind}: counted {} vs closed form {nl_exact}", counted.total()));
        }
        nl_runs += 1;
        for n in 2..=4 {
            let comb = if (i + n) % 2 == 0 { CombMode::VanillaConcat } else { CombMode::ScaledDotAttention };
            let cfg = PnlConfig::basic(n, kind, comb).unwrap();
            if cfg.check_input(shape).is_err() {
                continue;
            }
            let m = PnlModule::init(c, cfg, 62).unwrap();
            let (_, counted) = instrument_pnl(&x, &m).unwrap();
            let pnl_exact = mac_exact_pnl(shape, &cfg).unwrap();
            if counted.total() != pnl_exact {
                return Err(format!("PNL {shape} n={n}: counted {} vs closed form {pnl_exact}", counted.total()));
            }
            if pnl_exact >= nl_exact {
                return Err(format!("PNL {shape} n={n}: {pnl_exact} MACs is not below NL {nl_exact}"));
            }
            pnl_runs += 1;
        }
    }
    if nl_runs >= 10 && pnl_runs >= 10 {
        Ok(format!("{nl_runs} NL and {pnl_runs} PNL forwards, counts exact; PNL below NL in every case"))
    } else {
        Err(format!("only {nl_runs} NL and {pnl_runs} PNL configurations ran"))
    }
}

fn criterion_7() -> Outcome {
    let mut checked = 0;
    for c in (8..=4096).step_by(8) {
        let cfg = PnlConfig::basic(4, PairwiseKind::EmbeddedGaussian, CombMode::ScaledDotAttention).unwrap();
        let (pnl, nl) = (param_count_pnl(c, &cfg).unwrap(), param_count_nl(c, PairwiseKind::EmbeddedGaussian).unwrap());
        if pnl >= nl {
            return Err(format!("C={c}: pnl {pnl} >= nl {nl}"));
        }
        checked += 1;
    }
    let cfg = PnlConfig::basic(4, PairwiseKind::EmbeddedGaussian, CombMode::ScaledDotAttention).unwrap();
    let at = (param_count_pnl(1024, &cfg).unwrap(), param_count_nl(1024, PairwiseKind::EmbeddedGaussian).unwrap());
    if at != (262_144, 2_097_152) {
        return Err(format!("C=1024: got {at:?}"));
    }
    Ok(format!("{checked} channel counts (C % 8 == 0 in [8, 4096]) ordered; C=1024 gives 262144 vs 2097152"))
}

fn criterion_8() -> Outcome {
    let mut r = rng(8);
    let mut worst_row = 0.0f64;
    let trials = 120;
    for trial in 0..trials {
        let n = r.gen_range(2..=4);
        let c = r.gen_range(1..=6);
        let shape = Shape5::new(r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=4), c).unwrap();
        let scale = r.gen_range(0.1..10.0);
        let aligned: Vec<VideoFeature> =
            (0..n).map(|_| VideoFeature::random_uniform(shape, -scale, scale, &mut r)).collect();
        let p = FcombParams::random_attention(c, r.gen_range(0.1..3.0), &mut r);
        let stack = make_stack(&aligned).unwrap();
        for a in attention_weights(&stack, &p).unwrap() {
            for i in 0..n {
                worst_row = worst_row.max((a.row(i).iter().sum::<f64>() - 1.0).abs());
            }
        }
        let out = attend(&stack, &p).unwrap();
        for pos in 0..shape.numel() / c {
            for k in 0..c {
                let vals: Vec<f64> = aligned.iter().map(|a| a.data()[pos * c + k]).collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let slack = 1e-12 * hi.abs().max(lo.abs()).max(1.0);
                for s in 0..n {
                    let v = out.data()[pos * n * c + s * c + k];
                    if v < lo - slack || v > hi + slack {
                        return Err(format!("trial {trial}: output {v} outside [{lo}, {hi}]"));
                    }
                }
            }
        }
    }
    if worst_row <= 1e-12 {
        Ok(format!("{trials} trials, max |row sum - 1| {worst_row:.2e}, outputs inside the scale hull"))
    } else {
        Err(format!("row sum deviation {worst_row:.2e} > 1e-12"))
    }
}

fn criterion_9() -> Outcome {
    let cfg = PnlConfig::basic(2, PairwiseKind::EmbeddedGaussian, CombMode::VanillaConcat).unwrap();
    let mut summary = Vec::new();
    for seed in 0..3u64 {
        let task = SynthTask::default_with_seed(seed);
        let val = Dataset::generate(&task, Split::Val).unwrap();
        let base = Model::init(backbone_shape(&task), BlockChoice::None, seed).unwrap();
        let with = Model::init(backbone_shape(&task), BlockChoice::Pnl(cfg), seed).unwrap();
        let (lb, _) = evaluate(&base, &val).unwrap();
        let (lp, _) = evaluate(&with, &val).unwrap();
        if lb.len() != lp.len() || lb.iter().zip(&lp).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("seed {seed}: epoch-0 logits differ"));
        }
        let pnl = train_eval(BlockChoice::Pnl(cfg), &task, EPOCHS, BATCH, seed).unwrap().final_top1;
        let none = train_eval(BlockChoice::None, &task, EPOCHS, BATCH, seed).unwrap().final_top1;
        summary.push(format!("seed {seed}: pnl {pnl:.3} vs none {none:.3}"));
        if pnl < 0.95 || pnl < none {
            return Err(summary.join("; "));
        }
    }
    Ok(format!("epoch-0 logits bitwise equal; {}", summary.join("; ")))
}

/// Two identical vectors at distant positions, small noise elsewhere.
fn planted(shape: Shape5, p: (usize, usize, usize), q: (usize, usize, usize), seed: u64) -> VideoFeature {
    let mut r = rng(seed);
    let twin: Vec<f64> = (0..shape.c).map(|_| if r.gen() { 3.0 } else { -3.0 }).collect();
    VideoFeature::from_fn(shape, |_, t, h, w, c| {
        if (t, h, w) == p || (t, h, w) == q {
            twin[c]
        } else {
            r.gen_range(-0.01..0.01)
        }
    })
}

fn criterion_10() -> Outcome {
    let mut r = rng(10);
    let constructions = 10;
    for i in 0..constructions {
        let n = 2 + i % 2;
        let c = 4 * n;
        let shape = Shape5::new(1, 2, 8, 8, c).unwrap();
        let coarse = 1 << (n - 1);
        let (p, q) = loop {
            let a = (r.gen_range(0..2), r.gen_range(0..8), r.gen_range(0..8));
            let b = (r.gen_range(0..2), r.gen_range(0..8), r.gen_range(0..8));
            let cell = |x: (usize, usize, usize)| (x.0, x.1 / coarse, x.2 / coarse);
            if cell(a) != cell(b) {
                break (a, b);
            }
        };
        let x = planted(shape, p, q, 100 + i as u64);
        let kind = if i % 4 < 2 { PairwiseKind::Gaussian } else { PairwiseKind::EmbeddedGaussian };
        let cfg = PnlConfig::basic(n, kind, CombMode::ScaledDotAttention).unwrap();
        let mut shared = NonLocalParams::init(4, kind, i as u64).unwrap();
        if kind.uses_embeddings() {
            // tie the embeddings so the affinity is a similarity
            let theta = Matrix::random_uniform(4, 2, -1.0, 1.0, &mut r);
            shared = NonLocalParams::new(kind, Some(theta.clone()), Some(theta), shared.w_g().clone(), shared.w_z().clone(), None).unwrap();
        }
        let regions = attention_map_extract(&x, &shared, &cfg, p, 2).unwrap();
        for level in &regions {
            let k = level[0].scale;
            let own = (p.0, p.1 >> k, p.2 >> k);
            let twin = (q.0, q.1 >> k, q.2 >> k);
            let best = level.iter().map(|a| (a.t, a.h, a.w)).find(|&cell| cell != own);
            if best != Some(twin) {
                return Err(format!("construction {i}, scale {k}: top match {best:?}, planted twin {twin:?}"));
            }
        }
    }
    Ok(format!("{constructions}/{constructions} constructions retrieve the planted twin at every scale"))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("oracle equivalence", criterion_1),
        ("composed-oracle pyramid equivalence", criterion_2),
        ("identity initialization", criterion_3),
        ("gradient checks", criterion_4),
        ("cost-model identities", criterion_5),
        ("counter soundness", criterion_6),
        ("parameter-count ordering", criterion_7),
        ("attention normalization", criterion_8),
        ("learning smoke test", criterion_9),
        ("planted-correlation retrieval", criterion_10),
    ];
    let mut all = true;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {:>2} PASS {name}: {msg} ({secs:.1}s)", i + 1),
            Err(msg) => {
                all = false;
                println!("criterion {:>2} FAIL {name}: {msg} ({secs:.1}s)", i + 1);
            }
        }
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
