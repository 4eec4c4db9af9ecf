//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Runs as a plain binary (`harness = false`) so the report reads top to
//! bottom: `cargo test -p wmmd --test acceptance`.

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wmmd::cem::Arm;
use wmmd::data::{make_bias_pair, MixtureSpec};
use wmmd::experiment::{
    bias_trend, lambda_trend, oracle_pair, run_bias_sweep, run_gradient_check, run_lambda_sweep, summarize,
    train_cell, write_sweep, ExperimentKind, GradientCheckConfig, RunConfig, RunDir,
};
use wmmd::kernels::KernelSpec;
use wmmd::mmd::{mmd2_linear, mmd2_quadratic, wmmd2_linear, wmmd2_quadratic, AuxWeights};
use wmmd::numerics::Matrix;

struct Outcome {
    passed: bool,
    detail: String,
}

fn run(n: u32, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let out = f();
    let elapsed = t.elapsed();
    let in_time = elapsed < limit;
    let passed = out.passed && in_time;
    let status = if passed { "PASS" } else { "FAIL" };
    let time_note = if in_time { "" } else { " (over time limit)" };
    println!(
        "criterion {n} {name}: {status} [{:.1}s / {}s{time_note}] {}",
        elapsed.as_secs_f64(),
        limit.as_secs(),
        out.detail
    );
    passed
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn reduction_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.random_range(1..=6);
        let (m, n) = (rng.random_range(2..=50), rng.random_range(2..=50));
        let c = rng.random_range(1..=5);
        let xs = random_matrix(&mut rng, m, d);
        let xt = random_matrix(&mut rng, n, d);
        let ys: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
        let k = rng.random_range(1..=5);
        let spec = KernelSpec::new((0..k).map(|_| rng.random_range(0.1..4.0)).collect(), random_simplex(&mut rng, k)).unwrap();
        let w = AuxWeights::ones(random_simplex(&mut rng, c)).unwrap();
        worst = worst
            .max(rel(
                wmmd2_quadratic(&xs, &ys, &xt, &w, &spec).unwrap(),
                mmd2_quadratic(&xs, &xt, &spec).unwrap(),
            ))
            .max(rel(
                wmmd2_linear(&xs, &ys, &xt, &w, &spec).unwrap(),
                mmd2_linear(&xs, &xt, &spec).unwrap(),
            ));
    }
    Outcome {
        passed: worst <= 1e-12,
        detail: format!("100 fixtures, max relative gap {worst:.2e} (limit 1e-12)"),
    }
}

/// U-statistic written out from the kernel definition.
fn u_statistic(x: &Matrix, y: &Matrix, spec: &KernelSpec) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
        spec.bandwidths()
            .iter()
            .zip(spec.betas())
            .map(|(s, beta)| beta * (-d2 / (2.0 * s * s)).exp())
            .sum::<f64>()
    };
    let (m, n) = (x.rows(), y.rows());
    let mut xx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                xx += k(x.row(i), x.row(j));
            }
        }
    }
    let mut yy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                yy += k(y.row(i), y.row(j));
            }
        }
    }
    let mut xy = 0.0;
    for i in 0..m {
        for j in 0..n {
            xy += k(x.row(i), y.row(j));
        }
    }
    xx / (m * (m - 1)) as f64 + yy / (n * (n - 1)) as f64 - 2.0 * xy / (m * n) as f64
}

fn linear_unbiasedness() -> Outcome {
    let base = MixtureSpec::simplex(2, 2, 1.5).unwrap();
    let settings = [
        ("same-distribution", base.without_shift(), [0.5, 0.5]),
        ("mean-shift", base.clone(), [0.5, 0.5]),
        ("prior-shift", base.without_shift(), [0.8, 0.2]),
    ];
    let mut passed = true;
    let mut parts = Vec::new();
    for (i, (name, spec, priors)) in settings.iter().enumerate() {
        let pair = make_bias_pair(spec, priors, 400, 400, 100 + i as u64).unwrap();
        let x = &pair.source.features;
        let y = pair.target.features();
        let kernel = KernelSpec::from_data(&x.vstack(y).unwrap()).unwrap();
        let u = u_statistic(x, y, &kernel);
        let mut rng = ChaCha8Rng::seed_from_u64(200 + i as u64);
        let mut xi: Vec<usize> = (0..x.rows()).collect();
        let mut yi: Vec<usize> = (0..y.rows()).collect();
        let vals: Vec<f64> = (0..200)
            .map(|_| {
                xi.shuffle(&mut rng);
                yi.shuffle(&mut rng);
                mmd2_linear(&x.select_rows(&xi).unwrap(), &y.select_rows(&yi).unwrap(), &kernel).unwrap()
            })
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let se = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        let z = (mean - u).abs() / se;
        passed &= z <= 3.0;
        parts.push(format!("{name} {z:.2} SE"));
    }
    Outcome {
        passed,
        detail: format!("200 shuffles each: {} (limit 3)", parts.join(", ")),
    }
}

fn gradient_fidelity() -> Outcome {
    let cfg = RunConfig {
        seeds: vec![5],
        gradient: GradientCheckConfig {
            cases: 24,
            ..GradientCheckConfig::default()
        },
        ..RunConfig::default()
    };
    let r = run_gradient_check(&cfg).unwrap();
    let skipped: usize = r.cases.iter().map(|c| c.skipped).sum();
    let checked: usize = r.cases.iter().map(|c| c.parameters - c.skipped).sum();
    Outcome {
        passed: r.passed && r.cases.len() >= 20 && r.max_relative_error < 1e-4,
        detail: format!(
            "{} configurations, {checked} parameters ({skipped} at ReLU kinks skipped), max relative error {:.2e} (limit 1e-4)",
            r.cases.len(),
            r.max_relative_error
        ),
    }
}

fn oracle_weight_correction() -> Outcome {
    let pairs: Vec<(f64, f64)> = (0..20).map(|s| oracle_pair(2000, 300 + s).unwrap()).collect();
    let plain = pairs.iter().map(|p| p.0).sum::<f64>() / 20.0;
    let weighted = pairs.iter().map(|p| p.1).sum::<f64>() / 20.0;
    let ratio = weighted / plain;
    Outcome {
        passed: ratio < 0.25,
        detail: format!("n = 2000, 20 seeds: mean MMD² {plain:.3e}, mean WMMD² {weighted:.3e}, ratio {ratio:.3} (limit 0.25)"),
    }
}

fn bias_robustness() -> Outcome {
    let cfg = RunConfig::default();
    let rows = run_bias_sweep(&cfg).unwrap();
    let groups = summarize(&rows);
    let failed = rows.iter().filter(|r| r.failed()).count();
    let trend = bias_trend(&groups).unwrap();
    let (dan, wdan) = (trend.drops["dan"], trend.drops["wdan"]);
    let acc = |arm: Arm, b: f64| {
        groups
            .iter()
            .find(|g| g.arm == arm && g.bias == b)
            .and_then(|g| g.mean_accuracy)
            .unwrap()
    };
    let mut ok = wdan < dan && failed == 0 && cfg.seeds.len() >= 10;
    let mut high = Vec::new();
    for &b in cfg.biases.iter().filter(|&&b| b >= 0.7) {
        let (d, w) = (acc(Arm::Dan, b), acc(Arm::Wdan, b));
        ok &= w >= d;
        high.push(format!("{b}: {w:.3} vs {d:.3}"));
    }
    Outcome {
        passed: ok,
        detail: format!(
            "{} seeds, drop 0.5->0.9 wdan {wdan:.3} dan {dan:.3}; wdan vs dan at {}",
            cfg.seeds.len(),
            high.join(", ")
        ),
    }
}

fn lambda_sweep_trend() -> Outcome {
    let cfg = RunConfig::default();
    let rows = run_lambda_sweep(&cfg).unwrap();
    let t = lambda_trend(&summarize(&rows), Arm::Wdan).unwrap();
    let gain = t.best - t.baseline;
    Outcome {
        passed: gain >= 0.02 && t.largest < t.best,
        detail: format!(
            "{} seeds at bias {}: baseline {:.3}, best {:.3} at λ {} (gain {:.1} points, need 2), λ {} gives {:.3}",
            cfg.seeds.len(),
            cfg.bias,
            t.baseline,
            t.best,
            t.best_lambda,
            100.0 * gain,
            t.largest_lambda,
            t.largest
        ),
    }
}

fn alpha_recovery() -> Outcome {
    let cfg = RunConfig::default();
    let bias = 0.8;
    let truth = [bias / 0.5, (1.0 - bias) / 0.5];
    let seeds: Vec<u64> = (0..20).collect();
    let hits = seeds
        .iter()
        .filter(|&&s| {
            let (state, _) = train_cell(&cfg, bias, cfg.train.lambda, Arm::Wdan, s).unwrap();
            let a = state.weights.normalized_alphas();
            a.iter().zip(&truth).all(|(x, t)| (x - t).abs() <= 0.15)
        })
        .count();
    Outcome {
        passed: hits * 5 >= seeds.len() * 4,
        detail: format!("true α ({:.1}, {:.1}); {hits}/20 seeds within 0.15 (need 16)", truth[0], truth[1]),
    }
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        kind: ExperimentKind::BiasSweep,
        biases: vec![0.5, 0.9],
        seeds: vec![3, 4],
        out_dir: root.path().to_path_buf(),
        ..RunConfig::default()
    };
    let sweep = |cfg: &RunConfig| {
        let dir = RunDir::create(&cfg.out_dir).unwrap();
        dir.write_json("config.json", cfg).unwrap();
        let rows = run_bias_sweep(cfg).unwrap();
        write_sweep(&dir, cfg.kind, &rows, cfg.mixture.class_count).unwrap();
        (dir, rows)
    };
    let (a, rows_a) = sweep(&cfg);
    let replay = RunConfig::load(a.path().join("config.json")).unwrap();
    let (b, rows_b) = sweep(&replay);
    let same_history = rows_a
        .iter()
        .zip(&rows_b)
        .all(|(x, y)| x.loss_history.iter().map(|v| v.to_bits()).eq(y.loss_history.iter().map(|v| v.to_bits())));
    let files = ["results.csv", "loss_history.csv", "summary.json"];
    let same_files = files
        .iter()
        .all(|f| fs::read(a.path().join(f)).unwrap() == fs::read(b.path().join(f)).unwrap());
    Outcome {
        passed: replay == cfg && same_history && same_files && rows_a.len() == 12,
        detail: format!(
            "{} runs replayed from the emitted config; loss histories bit-identical: {same_history}; {} identical: {same_files}",
            rows_a.len(),
            files.join(", ")
        ),
    }
}

fn main() -> ExitCode {
    let min = |m: u64| Duration::from_secs(60 * m);
    let results = [
        run(1, "reduction identity", min(1), reduction_identity),
        run(2, "linear estimator unbiasedness", min(2), linear_unbiasedness),
        run(3, "gradient fidelity", min(2), gradient_fidelity),
        run(4, "oracle-weight correction", min(2), oracle_weight_correction),
        run(5, "bias robustness", min(15), bias_robustness),
        run(6, "lambda sweep", min(15), lambda_sweep_trend),
        run(7, "alpha recovery", min(10), alpha_recovery),
        run(8, "determinism", min(15), determinism),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
