//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::fs;
use std::time::{Duration, Instant};

use alpha_margin::cli::{run_from, EXIT_OK};
use alpha_margin::evalkit::{
    det_points, frr_at_far, make_trials, score_trials, FarOutcome, TrialScoreSet,
};
use alpha_margin::losses::{evaluate_loss, margin_logits};
use alpha_margin::synthdata::{generate, save, Dataset, SampleCounts, SynthSpec};
use alpha_margin::trainer::{backward, forward_batch, train, AlphaConfig, LrStep, TrainConfig};
use alpha_margin::{
    alpha_softargmax, alpha_softmax, build_q_margin_measure, q_margin_loss, root_find_tau,
    AlphaParams, CosineVector, LogitVector, MarginConfig, MarginMode, ReferenceMeasure,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

const MODES: [MarginMode; 4] = [
    MarginMode::QMargin,
    MarginMode::A3m,
    MarginMode::CosFace,
    MarginMode::ArcFace,
];

/// Reference measures of three kinds: uniform, random and Q-Margin-like
/// (one entry strongly down-weighted).
fn mixed_q<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    match rng.random_range(0..3) {
        0 => vec![1.0; k],
        1 => (0..k).map(|_| 1.0 - rng.random_range(0.0..0.99)).collect(),
        _ => {
            let mut q = vec![1.0; k];
            q[rng.random_range(0..k)] = (-rng.random_range(0.0..10.0f64)).exp();
            q
        }
    }
}

fn criterion_1() -> Verdict {
    let mut rng = common::rng(1);
    let start = Instant::now();
    let (mut sum_dev, mut min_p, mut shift_dev) = (0.0f64, f64::INFINITY, 0.0f64);
    for _ in 0..10_000 {
        let k = rng.random_range(2..=512);
        let spread = rng.random_range(0.1..20.0);
        let theta: Vec<f64> = (0..k).map(|_| rng.random_range(-spread..spread)).collect();
        let q = ReferenceMeasure::new(mixed_q(&mut rng, k)).unwrap();
        let params = AlphaParams::new(common::ALPHAS[rng.random_range(0..5)]).unwrap();
        let c = rng.random_range(-50.0..50.0);
        let p = alpha_softargmax(&LogitVector::new(theta.clone()).unwrap(), &q, &params)
            .unwrap()
            .to_dense();
        let shifted: Vec<f64> = theta.iter().map(|t| t + c).collect();
        let ps = alpha_softargmax(&LogitVector::new(shifted).unwrap(), &q, &params)
            .unwrap()
            .to_dense();
        sum_dev = sum_dev.max((p.iter().sum::<f64>() - 1.0).abs());
        min_p = min_p.min(p.iter().cloned().fold(f64::INFINITY, f64::min));
        shift_dev = p
            .iter()
            .zip(&ps)
            .map(|(a, b)| (a - b).abs())
            .fold(shift_dev, f64::max);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        sum_dev <= 1e-8 && min_p >= 0.0 && shift_dev <= 1e-8 && secs < 10.0,
        format!("max |sum-1| {sum_dev:.2e}, min p {min_p:.2e}, max shift dev {shift_dev:.2e}, {secs:.2}s"),
    )
}

fn criterion_2() -> Verdict {
    let mut rng = common::rng(2);
    let params = AlphaParams::new(2.0).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..=256);
        let spread = rng.random_range(0.1..10.0);
        let theta: Vec<f64> = (0..k).map(|_| rng.random_range(-spread..spread)).collect();
        let p = alpha_softargmax(
            &LogitVector::new(theta.clone()).unwrap(),
            &ReferenceMeasure::ones(k),
            &params,
        )
        .unwrap()
        .to_dense();
        let oracle = common::sparsemax_oracle(&theta);
        worst = p
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(worst, f64::max);
    }
    verdict(
        worst <= 1e-8,
        format!("max |p - sparsemax| {worst:.2e} over 1000 instances"),
    )
}

fn criterion_3() -> Verdict {
    let mut rng = common::rng(3);
    let params = AlphaParams::new(1.0 + 1e-3).unwrap();
    let mut post_dev = 0.0f64;
    let mut loss_dev = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..=50);
        let theta: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let q = mixed_q(&mut rng, k);
        let p = alpha_softargmax(
            &LogitVector::new(theta.clone()).unwrap(),
            &ReferenceMeasure::new(q.clone()).unwrap(),
            &params,
        )
        .unwrap()
        .to_dense();
        let soft = common::weighted_softmax(&theta, &q);
        post_dev = p
            .iter()
            .zip(&soft)
            .map(|(a, b)| (a - b).abs())
            .fold(post_dev, f64::max);

        let c: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = rng.random_range(0..k);
        let s = rng.random_range(1.0..16.0);
        let m = rng.random_range(0.0..0.5);
        let cv = CosineVector::new(c).unwrap();
        let qm = q_margin_loss(
            &cv,
            y,
            &MarginConfig::new(MarginMode::QMargin, s, m).unwrap(),
            &params,
        )
        .unwrap();
        let ce = evaluate_loss(
            &cv,
            y,
            &MarginConfig::new(MarginMode::CosFace, s, m).unwrap(),
            &params,
        )
        .unwrap();
        loss_dev = loss_dev.max((qm.value - ce.value).abs() / (1.0 + ce.value));
    }
    verdict(
        post_dev <= 5e-3 && loss_dev <= 1e-2,
        format!("max posterior dev {post_dev:.2e}; max Q-Margin vs CosFace rel dev {loss_dev:.2e}"),
    )
}

/// Loss up to the θ-independent term `D_f(e_y : q)`.
fn logit_loss(
    mode: MarginMode,
    theta: &[f64],
    y: usize,
    cfg: &MarginConfig,
    params: &AlphaParams,
) -> f64 {
    let th = LogitVector::new(theta.to_vec()).unwrap();
    let k = theta.len();
    match mode {
        MarginMode::QMargin => {
            alpha_softmax(&th, &build_q_margin_measure(y, k, cfg).unwrap(), params).unwrap()
                - theta[y]
        }
        MarginMode::A3m => {
            alpha_softmax(&th, &ReferenceMeasure::ones(k), params).unwrap() - theta[y]
        }
        _ => common::cross_entropy(theta, y),
    }
}

fn trainer_prototype_check(mode: MarginMode) -> f64 {
    let data = generate(&SynthSpec {
        k: 6,
        d: 5,
        samples: SampleCounts::Fixed { per_id: 3 },
        noise_kappa: 10.0,
        seed: 9,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = alpha_margin::model::Model::init(&mut rng, 5, 7, 4, 6);
    let cfg = MarginConfig::new(mode, 8.0, 0.3).unwrap();
    let params = AlphaParams::new(1.5).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let loss =
        |m: &alpha_margin::model::Model| forward_batch(m, &data, &idx, &cfg, &params).unwrap().loss;
    let fwd = forward_batch(&model, &data, &idx, &cfg, &params).unwrap();
    let grads = backward(&model, &data, &idx, &fwd, &fwd.grad_logits, &cfg).unwrap();
    let h = 1e-6;
    for i in 0..model.params()[4].len() {
        let mut plus = model.clone();
        plus.params_mut()[4][i] += h;
        let mut minus = model.clone();
        minus.params_mut()[4][i] -= h;
        let (f0, fp, fm) = (loss(&model), loss(&plus), loss(&minus));
        if common::rel_err((fp - f0) / h, (f0 - fm) / h) > 1e-3 {
            continue;
        }
        let fd = (fp - fm) / (2.0 * h);
        if fd.abs() < 1e-3 {
            continue;
        }
        return (grads.0[4][i] - fd).abs() / fd.abs();
    }
    f64::INFINITY
}

fn criterion_4() -> Verdict {
    let mut rng = common::rng(4);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for mode in MODES {
        let mut n = 0;
        while n < 250 {
            let k = rng.random_range(2..=16);
            let c: Vec<f64> = (0..k).map(|_| rng.random_range(-0.95..0.95)).collect();
            let y = rng.random_range(0..k);
            let a = common::ALPHAS[rng.random_range(0..5)];
            let params = AlphaParams::new(a).unwrap();
            let cfg = MarginConfig::new(
                mode,
                rng.random_range(2.0..32.0),
                rng.random_range(0.0..0.5),
            )
            .unwrap();
            let cv = CosineVector::new(c).unwrap();
            let out = evaluate_loss(&cv, y, &cfg, &params).unwrap();
            let theta = margin_logits(&cv, y, &cfg).unwrap().as_slice().to_vec();
            if mode.is_alpha() {
                let q = match mode {
                    MarginMode::QMargin => build_q_margin_measure(y, k, &cfg).unwrap(),
                    _ => ReferenceMeasure::ones(k),
                };
                let tau =
                    root_find_tau(&LogitVector::new(theta.clone()).unwrap(), &q, &params).unwrap();
                if !common::away_from_kink(&theta, tau, a, 1e-3) {
                    continue;
                }
            }
            let fd = common::central_diff(|t| logit_loss(mode, t, y, &cfg, &params), &theta, 1e-6);
            worst = out
                .grad_logits
                .iter()
                .zip(&fd)
                .map(|(g, f)| common::rel_err(*g, *f))
                .fold(worst, f64::max);
            n += 1;
            checked += 1;
        }
    }
    let proto: Vec<f64> = MODES.iter().map(|m| trainer_prototype_check(*m)).collect();
    let proto_worst = proto.iter().cloned().fold(0.0, f64::max);
    verdict(
        worst <= 1e-4 && proto_worst <= 1e-3,
        format!(
            "max grad_logits rel err {worst:.2e} over {checked} draws; prototype-coordinate rel err {proto_worst:.2e}"
        ),
    )
}

/// The long-tail training regime shared by criteria 5-7.
fn longtail_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        k: 200,
        d: 16,
        samples: SampleCounts::LongTail {
            n_many: 20,
            fraction_few: 0.3,
            n_few: 2,
        },
        noise_kappa: 30.0,
        seed: 100 + seed,
    }
}

/// Held-out identities: a fresh draw of class means.
fn heldout_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        samples: SampleCounts::Fixed { per_id: 10 },
        seed: 1000 + seed,
        ..longtail_spec(seed)
    }
}

fn run_config(mode: MarginMode, seed: u64, reinit: Option<usize>) -> TrainConfig {
    let (scale, margin) = match mode {
        MarginMode::A3m | MarginMode::ArcFace => (32.0, 0.4),
        MarginMode::QMargin | MarginMode::CosFace => (32.0, 0.2),
    };
    TrainConfig {
        epochs: 20,
        batch_size: 64,
        lr_schedule: vec![
            LrStep { epoch: 0, lr: 0.02 },
            LrStep {
                epoch: 15,
                lr: 0.002,
            },
        ],
        momentum: 0.9,
        weight_decay: 5e-4,
        reinit_epoch: reinit,
        seed,
        hidden: 64,
        emb_dim: 32,
        loss: MarginConfig::new(mode, scale, margin).unwrap(),
        alpha: AlphaConfig::new(1.25),
    }
}

struct RunResult {
    misaligned: f64,
    sparsity: f64,
    frr: f64,
    secs: f64,
}

fn run_one(
    train_set: &Dataset,
    test_set: &Dataset,
    scores_for: &[alpha_margin::evalkit::Trial],
    cfg: &TrainConfig,
) -> RunResult {
    let start = Instant::now();
    let (model, log) = train(train_set, cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let last = log.epochs.last().unwrap().report;
    let scores = score_trials(test_set, &model.embedder, scores_for).unwrap();
    let frr = frr_at_far(&scores, 1e-2).unwrap().frr().unwrap_or(f64::NAN);
    RunResult {
        misaligned: last.misaligned_image_fraction,
        sparsity: last.posterior_sparsity,
        frr,
        secs,
    }
}

const VARIANTS: [&str; 4] = ["A3M", "A3M-I", "Q-Margin", "CosFace"];

fn training_runs() -> Vec<[RunResult; 4]> {
    (0..3u64)
        .map(|seed| {
            let train_set = generate(&longtail_spec(seed)).unwrap();
            let test_set = generate(&heldout_spec(seed)).unwrap();
            let trials = make_trials(test_set.labels(), 2000, 20000, seed).unwrap();
            let runs = [
                run_config(MarginMode::A3m, seed, None),
                run_config(MarginMode::A3m, seed, Some(3)),
                run_config(MarginMode::QMargin, seed, None),
                run_config(MarginMode::CosFace, seed, None),
            ]
            .map(|cfg| run_one(&train_set, &test_set, &trials, &cfg));
            for (name, r) in VARIANTS.iter().zip(&runs) {
                println!(
                    "    seed {seed} {name:<8} misaligned_images {:.4} posterior_sparsity {:.4} frr@far=1e-2 {:.4} ({:.1}s)",
                    r.misaligned, r.sparsity, r.frr, r.secs
                );
            }
            runs
        })
        .collect()
}

fn mean(runs: &[[RunResult; 4]], v: usize, f: impl Fn(&RunResult) -> f64) -> f64 {
    runs.iter().map(|r| f(&r[v])).sum::<f64>() / runs.len() as f64
}

fn criterion_5(runs: &[[RunResult; 4]]) -> Verdict {
    let [a3m, a3mi, qm] = [0, 1, 2].map(|v| mean(runs, v, |r| r.misaligned));
    let slowest = runs.iter().flatten().map(|r| r.secs).fold(0.0, f64::max);
    verdict(
        a3m > a3mi && a3m > qm && slowest < 300.0,
        format!("mean misaligned_images A3M {a3m:.4} vs A3M-I {a3mi:.4}, Q-Margin {qm:.4}; slowest run {slowest:.1}s"),
    )
}

fn criterion_6(runs: &[[RunResult; 4]]) -> Verdict {
    let lowest = runs
        .iter()
        .flat_map(|r| r[..3].iter())
        .map(|r| r.sparsity)
        .fold(1.0, f64::min);
    verdict(
        lowest > 0.90,
        format!("lowest final posterior_sparsity over A3M/A3M-I/Q-Margin runs {lowest:.4}"),
    )
}

fn criterion_7(runs: &[[RunResult; 4]]) -> Verdict {
    let qm = mean(runs, 2, |r| r.frr);
    let cos = mean(runs, 3, |r| r.frr);
    verdict(
        qm <= cos + 0.01,
        format!("mean FRR@FAR=1e-2 Q-Margin {qm:.4} vs CosFace {cos:.4} (+0.01 allowed)"),
    )
}

fn criterion_8() -> Verdict {
    let mut rng = common::rng(8);
    let mut ok = true;
    for _ in 0..500 {
        let draw = |rng: &mut ChaCha8Rng, n: usize| {
            (0..n)
                .map(|_| (rng.random_range(-20..=20) as f64) / 20.0)
                .collect()
        };
        let ng = rng.random_range(1..60);
        let ni = rng.random_range(1..60);
        let scores = TrialScoreSet {
            genuine: draw(&mut rng, ng),
            impostor: draw(&mut rng, ni),
        };
        let det = det_points(&scores).unwrap();
        ok &= det
            .windows(2)
            .all(|w| w[0].far <= w[1].far && w[0].frr >= w[1].frr);
        let far = rng.random_range(0.01..=1.0);
        if let FarOutcome::Attained {
            frr,
            threshold,
            far: got,
        } = frr_at_far(&scores, far).unwrap()
        {
            ok &= det
                .iter()
                .any(|p| p.threshold == threshold && p.frr == frr && p.far == got);
        }
    }
    let example = TrialScoreSet {
        genuine: vec![0.9, 0.8, 0.3],
        impostor: vec![0.4, 0.2, 0.1, 0.05],
    };
    let worked = matches!(
        frr_at_far(&example, 0.25).unwrap(),
        FarOutcome::Attained { threshold, frr, .. } if threshold == 0.4 && frr == 1.0 / 3.0
    );
    verdict(
        ok && worked,
        format!("monotone and consistent on 500 score sets: {ok}; worked example exact: {worked}"),
    )
}

fn criterion_9() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.amds");
    save(
        &generate(&SynthSpec {
            k: 50,
            ..longtail_spec(0)
        })
        .unwrap(),
        &data,
    )
    .unwrap();
    let mut metrics = Vec::new();
    for run in ["a", "b"] {
        let cfg = alpha_margin::config::RunConfig {
            data: alpha_margin::config::DataSection {
                dataset: data.clone(),
            },
            output: alpha_margin::config::OutputSection {
                dir: dir.path().join(run),
            },
            train: TrainConfig {
                epochs: 6,
                ..run_config(MarginMode::A3m, 7, Some(3))
            },
        };
        let path = dir.path().join(format!("{run}.toml"));
        fs::write(&path, cfg.to_toml().unwrap()).unwrap();
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run_from(
            ["alpha-margin", "train", path.to_str().unwrap()],
            &mut out,
            &mut err,
        );
        if code != EXIT_OK {
            return verdict(
                false,
                format!("train exited {code}: {}", String::from_utf8_lossy(&err)),
            );
        }
        metrics.push(fs::read(dir.path().join(run).join("metrics.csv")).unwrap());
    }
    verdict(
        metrics[0] == metrics[1],
        format!(
            "metrics.csv identical across runs: {}",
            metrics[0] == metrics[1]
        ),
    )
}

fn main() {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = f();
        let elapsed: Duration = start.elapsed();
        if !v.pass {
            failures += 1;
        }
        println!(
            "criterion {n} [{name}]: {} ({}; {:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64()
        );
    };
    report(1, "solver correctness", &mut criterion_1);
    report(2, "sparsemax oracle", &mut criterion_2);
    report(3, "softmax/CosFace recovery", &mut criterion_3);
    report(4, "gradient audits", &mut criterion_4);
    println!("  training runs for criteria 5-7:");
    let runs = training_runs();
    report(5, "misalignment", &mut || criterion_5(&runs));
    report(6, "sparsity retention", &mut || criterion_6(&runs));
    report(7, "verification quality", &mut || criterion_7(&runs));
    report(8, "DET integrity", &mut criterion_8);
    report(9, "determinism", &mut criterion_9);
    println!("acceptance: {} of 9 criteria passed", 9 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
