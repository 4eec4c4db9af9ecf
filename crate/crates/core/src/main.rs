use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use wmmd::cem::{estimate_source_priors, evaluate, train, train_monitored, Arm, TrainConfig};
use wmmd::data::{load_csv, CsvSchema, Dataset};
use wmmd::experiment::{
    lambda_trend, run_bias_sweep, run_estimator_check, run_gradient_check, run_lambda_sweep, run_single_train,
    summarize, bias_trend, write_checks, write_gradient_report, write_single_runs, write_sweep, ExperimentKind,
    RunConfig, RunDir, SweepRow,
};
use wmmd::model::{load_checkpoint, save_checkpoint};
use wmmd::Result;

/// Weighted-MMD domain adaptation experiments.
#[derive(Parser)]
#[command(name = "wmmd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train all arms across target bias levels.
    BiasSweep(Common),
    /// Train DAN-mode and WDAN across the λ grid on one biased pair.
    LambdaSweep(Common),
    /// Reduction, unbiasedness and oracle-weight checks of the estimators.
    EstimatorCheck(Common),
    /// Finite-difference check of the training gradient.
    GradCheck(Common),
    /// Train one arm, on the synthetic pair or on CSV files.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled CSV.
    Eval(EvalArgs),
}

#[derive(Args)]
struct Common {
    /// JSON run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed to run; repeat for several.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output root; each invocation writes a fresh run-NNN directory under it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_enum)]
    arm: Option<Arm>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Labeled source CSV (last column is the class).
    #[arg(long, requires = "target")]
    source: Option<PathBuf>,
    /// Target CSV; features only unless --target-labeled.
    #[arg(long, requires = "source")]
    target: Option<PathBuf>,
    /// The target CSV has a trailing label column, used for scoring only.
    #[arg(long)]
    target_labeled: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled CSV to score.
    #[arg(long)]
    data: PathBuf,
}

impl Common {
    fn resolve(&self, kind: ExperimentKind) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.kind = kind;
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(l) = self.lambda {
            cfg.train.lambda = l;
        }
        if let Some(g) = self.gamma {
            cfg.train.gamma = g;
        }
        if let Some(a) = self.arm {
            cfg.arm = a;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn start(common: &Common, kind: ExperimentKind) -> Result<(RunConfig, RunDir)> {
    let cfg = common.resolve(kind)?;
    let dir = RunDir::create(&cfg.out_dir)?;
    dir.write_json("config.json", &cfg)?;
    eprintln!("writing {}", dir.path().display());
    Ok((cfg, dir))
}

fn print_groups(rows: &[SweepRow]) {
    println!("{:>6} {:>7} {:>9} {:>5} {:>9} {:>8}", "bias", "lambda", "arm", "runs", "accuracy", "se");
    for g in summarize(rows) {
        println!(
            "{:>6} {:>7} {:>9} {:>5} {:>9} {:>8}",
            g.bias,
            g.lambda,
            g.arm.name(),
            g.runs - g.failed,
            g.mean_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
            g.std_err.map_or("-".into(), |s| format!("{s:.4}")),
        );
    }
}

fn finish_sweep(rows: &[SweepRow]) -> ExitCode {
    let failed = rows.iter().filter(|r| r.failed()).count();
    if failed > 0 {
        eprintln!("{failed} of {} runs failed", rows.len());
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn bias_sweep(common: &Common) -> Result<ExitCode> {
    let (cfg, dir) = start(common, ExperimentKind::BiasSweep)?;
    let rows = run_bias_sweep(&cfg)?;
    write_sweep(&dir, cfg.kind, &rows, cfg.mixture.class_count)?;
    print_groups(&rows);
    if let Some(t) = bias_trend(&summarize(&rows)) {
        for (arm, drop) in &t.drops {
            println!("drop {} -> {}: {arm} {drop:.4}", t.low_bias, t.high_bias);
        }
    }
    Ok(finish_sweep(&rows))
}

fn lambda_sweep(common: &Common) -> Result<ExitCode> {
    let (cfg, dir) = start(common, ExperimentKind::LambdaSweep)?;
    let rows = run_lambda_sweep(&cfg)?;
    write_sweep(&dir, cfg.kind, &rows, cfg.mixture.class_count)?;
    print_groups(&rows);
    let groups = summarize(&rows);
    for arm in [Arm::Dan, Arm::Wdan] {
        if let Some(t) = lambda_trend(&groups, arm) {
            println!(
                "{}: baseline {:.4}, best {:.4} at lambda {}, largest lambda {} gives {:.4}",
                arm.name(),
                t.baseline,
                t.best,
                t.best_lambda,
                t.largest_lambda,
                t.largest
            );
        }
    }
    Ok(finish_sweep(&rows))
}

fn estimator_check(common: &Common) -> Result<ExitCode> {
    let (cfg, dir) = start(common, ExperimentKind::EstimatorCheck)?;
    let checks = run_estimator_check(&cfg)?;
    write_checks(&dir, &checks)?;
    for c in &checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("{status} {}: {:.3e} (limit {:.3e}) {}", c.name, c.measured, c.threshold, c.detail);
    }
    Ok(if checks.iter().all(|c| c.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn grad_check(common: &Common) -> Result<ExitCode> {
    let (cfg, dir) = start(common, ExperimentKind::GradientCheck)?;
    let report = run_gradient_check(&cfg)?;
    write_gradient_report(&dir, &report)?;
    let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2e}"));
    println!("{:>4} {:>6} {:>6} {:>6} {:>9} {:>9} {:>9} {:>9}", "case", "lambda", "gamma", "params", "src_ce", "tgt_ce", "wmmd", "total");
    for c in &report.cases {
        println!(
            "{:>4} {:>6} {:>6.3} {:>6} {:>9} {:>9} {:>9} {:>9}",
            c.index,
            c.lambda,
            c.gamma,
            c.parameters,
            show(Some(c.source_ce)),
            show(c.target_ce),
            show(c.wmmd),
            show(Some(c.total)),
        );
    }
    let status = if report.passed { "PASS" } else { "FAIL" };
    println!("{status} max relative error {:.3e} (limit {:.0e})", report.max_relative_error, report.tolerance);
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

#[derive(Serialize)]
struct ExternalRun<'a> {
    arm: Arm,
    train: &'a TrainConfig,
    loss_history: &'a [f64],
    alphas: Vec<f64>,
    target_accuracy: Option<f64>,
}

fn train_external(args: &TrainArgs, source: &PathBuf, target: &PathBuf) -> Result<ExitCode> {
    let (cfg, dir) = start(&args.common, ExperimentKind::SingleTrain)?;
    let src = load_csv(source, CsvSchema::labeled())?;
    let tgt_schema = if args.target_labeled {
        CsvSchema::labeled()
    } else {
        CsvSchema::unlabeled()
    };
    let tgt = load_csv(target, tgt_schema)?;
    let class_count = class_count(&src, &tgt)?;
    estimate_source_priors(src.labels()?, class_count)?;
    let model = cfg.model_config_for(src.dim(), class_count);
    let tc = cfg.arm.configure(&TrainConfig {
        seed: cfg.seeds[0],
        ..cfg.train.clone()
    });
    let state = if tgt.labels.is_some() {
        train_monitored(&src, &tgt.features, &model, &tc, &cfg.kernels, &tgt)?
    } else {
        train(&src, &tgt.features, &model, &tc, &cfg.kernels)?
    };
    let accuracy = match tgt.labels {
        Some(_) => Some(evaluate(&state.params, &tgt)?.accuracy),
        None => None,
    };
    save_checkpoint(&state.params, dir.path().join("model.json"))?;
    dir.write_json(
        "result.json",
        &ExternalRun {
            arm: cfg.arm,
            train: &tc,
            loss_history: &state.loss_history,
            alphas: state.weights.normalized_alphas(),
            target_accuracy: accuracy,
        },
    )?;
    println!("final loss {:.6}", state.loss_history.last().copied().unwrap_or(f64::NAN));
    println!("alpha {:?}", state.weights.normalized_alphas());
    if let Some(a) = accuracy {
        println!("target accuracy {a:.4}");
    }
    Ok(ExitCode::SUCCESS)
}

fn class_count(src: &Dataset, tgt: &Dataset) -> Result<usize> {
    let max = src
        .labels()?
        .iter()
        .chain(tgt.labels.iter().flatten())
        .copied()
        .max()
        .unwrap_or(0);
    Ok(max + 1)
}

fn train_cmd(args: &TrainArgs) -> Result<ExitCode> {
    if let (Some(s), Some(t)) = (&args.source, &args.target) {
        return train_external(args, s, t);
    }
    let (cfg, dir) = start(&args.common, ExperimentKind::SingleTrain)?;
    let runs = run_single_train(&cfg)?;
    write_single_runs(&dir, &cfg, &runs)?;
    for r in &runs {
        println!(
            "seed {}: target accuracy {:.4}, alpha {:?}",
            r.seed,
            r.accuracy,
            r.state.weights.normalized_alphas()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(args: &EvalArgs) -> Result<ExitCode> {
    let params = load_checkpoint(&args.checkpoint)?;
    let data = load_csv(&args.data, CsvSchema::labeled())?;
    let e = evaluate(&params, &data)?;
    println!("{}", serde_json::to_string_pretty(&e)?);
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::BiasSweep(c) => bias_sweep(c),
        Command::LambdaSweep(c) => lambda_sweep(c),
        Command::EstimatorCheck(c) => estimator_check(c),
        Command::GradCheck(c) => grad_check(c),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
