//! Sweeps, verification reports and run-directory bookkeeping behind the
//! `wmmd` command-line tool.
//!
//! Every sweep cell `(bias, λ, arm, seed)` draws its own domain pair from
//! `(mixture, seed)` and trains with `seed`, so a cell is reproducible on its
//! own and cells can run in any order. Results come back in grid order.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cem::{evaluate, train, train_monitored, Arm, KernelSchedule, TrainConfig, TrainState, LAMBDA_GRID};
use crate::data::{make_bias_pair, MixtureSpec};
use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, DEFAULT_MULTIPLIERS};
use crate::mmd::{mmd2_linear, mmd2_quadratic, mmd2_unbiased, wmmd2_linear, wmmd2_quadratic, AuxWeights};
use crate::model::{forward, loss_and_grad, loss_from_traces, save_checkpoint, ModelConfig, ModelParams, Objective};
use crate::numerics::{Activation, Matrix};

pub const BIAS_LEVELS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    BiasSweep,
    LambdaSweep,
    EstimatorCheck,
    GradientCheck,
    #[default]
    SingleTrain,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::BiasSweep => "bias-sweep",
            ExperimentKind::LambdaSweep => "lambda-sweep",
            ExperimentKind::EstimatorCheck => "estimator-check",
            ExperimentKind::GradientCheck => "gradient-check",
            ExperimentKind::SingleTrain => "single-train",
        }
    }
}

/// Sizes and thresholds of the estimator report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorCheckConfig {
    pub fixtures: usize,
    pub reduction_tolerance: f64,
    pub shuffles: usize,
    pub shuffle_size: usize,
    pub max_standard_errors: f64,
    pub oracle_size: usize,
    pub oracle_seeds: usize,
    pub max_oracle_ratio: f64,
}

impl Default for EstimatorCheckConfig {
    fn default() -> Self {
        Self {
            fixtures: 100,
            reduction_tolerance: 1e-12,
            shuffles: 200,
            shuffle_size: 500,
            max_standard_errors: 3.0,
            oracle_size: 2000,
            oracle_seeds: 20,
            max_oracle_ratio: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientCheckConfig {
    pub cases: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradientCheckConfig {
    fn default() -> Self {
        Self {
            cases: 24,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

/// Everything an experiment needs. Missing JSON fields take the defaults
/// below; the resolved config is written next to every run's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub kind: ExperimentKind,
    pub mixture: MixtureSpec,
    pub source_size: usize,
    pub target_size: usize,
    pub hidden_dims: Vec<usize>,
    pub tap_layers: Vec<usize>,
    pub activation: Activation,
    pub train: TrainConfig,
    pub kernels: KernelSchedule,
    /// Majority-class target weights visited by the bias sweep.
    pub biases: Vec<f64>,
    /// Majority-class target weight for the λ sweep and single runs.
    pub bias: f64,
    pub lambdas: Vec<f64>,
    /// Arm trained by single runs.
    pub arm: Arm,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub estimator: EstimatorCheckConfig,
    pub gradient: GradientCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::default(),
            mixture: MixtureSpec::spurious_cue(2.0, 1.0, 2.5).expect("preset is valid"),
            source_size: 1000,
            target_size: 1000,
            hidden_dims: vec![64, 32],
            tap_layers: vec![1, 2],
            activation: Activation::Relu,
            train: TrainConfig::default(),
            kernels: KernelSchedule::default(),
            biases: BIAS_LEVELS.to_vec(),
            bias: 0.8,
            lambdas: LAMBDA_GRID.to_vec(),
            arm: Arm::Wdan,
            seeds: (0..10).collect(),
            out_dir: PathBuf::from("out"),
            estimator: EstimatorCheckConfig::default(),
            gradient: GradientCheckConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Parameter("seeds must be non-empty".into()));
        }
        self.mixture.validate()?;
        if self.source_size < 2 || self.target_size < 2 {
            return Err(Error::Parameter("each domain needs at least 2 samples".into()));
        }
        for &b in self.biases.iter().chain(std::iter::once(&self.bias)) {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::Parameter(format!("bias {b} outside [0, 1]")));
            }
        }
        if self.biases.is_empty() || self.lambdas.is_empty() {
            return Err(Error::Parameter("bias and lambda grids must be non-empty".into()));
        }
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Parameter("lambdas must be >= 0".into()));
        }
        self.train.validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model_config_for(self.mixture.dim(), self.mixture.class_count)
    }

    pub fn model_config_for(&self, input_dim: usize, class_count: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            class_count,
            tap_layers: self.tap_layers.clone(),
            activation: self.activation,
        }
    }
}

/// Target priors with `bias` on class 0 and the rest split evenly.
pub fn bias_priors(bias: f64, class_count: usize) -> Vec<f64> {
    if class_count == 1 {
        return vec![1.0];
    }
    let rest = (1.0 - bias) / (class_count - 1) as f64;
    (0..class_count).map(|c| if c == 0 { bias } else { rest }).collect()
}

/// Outcome of one training cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub bias: f64,
    pub lambda: f64,
    pub arm: Arm,
    pub seed: u64,
    pub accuracy: Option<f64>,
    /// Final `α`, normalized so that `Σ w^s_c α_c = 1`.
    pub alphas: Vec<f64>,
    pub loss_history: Vec<f64>,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    bias: f64,
    lambda: f64,
    arm: Arm,
    seed: u64,
}

/// Trains one arm on the pair drawn for `(bias, seed)`. Returns the final
/// state and the target accuracy.
pub fn train_cell(cfg: &RunConfig, bias: f64, lambda: f64, arm: Arm, seed: u64) -> Result<(TrainState, f64)> {
    let c = cfg.mixture.class_count;
    let pair = make_bias_pair(&cfg.mixture, &bias_priors(bias, c), cfg.source_size, cfg.target_size, seed)?;
    let train_cfg = arm.configure(&TrainConfig {
        lambda,
        seed,
        ..cfg.train.clone()
    });
    let state = train(
        &pair.source,
        pair.target.features(),
        &cfg.model_config(),
        &train_cfg,
        &cfg.kernels,
    )?;
    let acc = evaluate(&state.params, &pair.target.evaluation_set())?.accuracy;
    Ok((state, acc))
}

fn run_cells(cfg: &RunConfig, cells: &[Cell]) -> Vec<SweepRow> {
    cells
        .par_iter()
        .map(|cell| {
            let mut row = SweepRow {
                bias: cell.bias,
                lambda: cell.lambda,
                arm: cell.arm,
                seed: cell.seed,
                accuracy: None,
                alphas: Vec::new(),
                loss_history: Vec::new(),
                error: None,
            };
            match train_cell(cfg, cell.bias, cell.lambda, cell.arm, cell.seed) {
                Ok((state, acc)) => {
                    row.accuracy = Some(acc);
                    row.alphas = state.weights.normalized_alphas();
                    row.loss_history = state.loss_history;
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect()
}

/// All three arms at every bias level, with `λ = train.lambda`.
pub fn run_bias_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for &bias in &cfg.biases {
        for arm in Arm::ALL {
            for &seed in &cfg.seeds {
                cells.push(Cell {
                    bias,
                    lambda: cfg.train.lambda,
                    arm,
                    seed,
                });
            }
        }
    }
    Ok(run_cells(cfg, &cells))
}

/// DAN-mode and WDAN at every λ on the pair with majority weight `bias`.
/// At λ = 0 both arms reduce to the same classifier-only run.
pub fn run_lambda_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for &lambda in &cfg.lambdas {
        for arm in [Arm::Dan, Arm::Wdan] {
            for &seed in &cfg.seeds {
                cells.push(Cell {
                    bias: cfg.bias,
                    lambda,
                    arm,
                    seed,
                });
            }
        }
    }
    Ok(run_cells(cfg, &cells))
}

/// Mean and standard error of one `(bias, λ, arm)` group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub bias: f64,
    pub lambda: f64,
    pub arm: Arm,
    pub runs: usize,
    pub failed: usize,
    pub mean_accuracy: Option<f64>,
    pub std_err: Option<f64>,
    pub mean_alphas: Vec<f64>,
}

pub fn mean_and_std_err(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (Some(mean), None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some((var / n).sqrt()))
}

/// Groups rows by `(bias, λ, arm)` in order of first appearance.
pub fn summarize(rows: &[SweepRow]) -> Vec<GroupSummary> {
    let mut order: Vec<(u64, u64, Arm)> = Vec::new();
    let mut groups: BTreeMap<(u64, u64, Arm), Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.bias.to_bits(), r.lambda.to_bits(), r.arm);
        if !groups.contains_key(&key) {
            order.push(key);
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let ok: Vec<&SweepRow> = g.iter().copied().filter(|r| !r.failed()).collect();
            let accs: Vec<f64> = ok.iter().filter_map(|r| r.accuracy).collect();
            let (mean_accuracy, std_err) = mean_and_std_err(&accs);
            let width = ok.first().map_or(0, |r| r.alphas.len());
            let mean_alphas = (0..width)
                .map(|c| ok.iter().map(|r| r.alphas[c]).sum::<f64>() / ok.len() as f64)
                .collect();
            GroupSummary {
                bias: g[0].bias,
                lambda: g[0].lambda,
                arm: g[0].arm,
                runs: g.len(),
                failed: g.len() - ok.len(),
                mean_accuracy,
                std_err,
                mean_alphas,
            }
        })
        .collect()
}

/// Accuracy drop from the lowest to the highest bias level, per arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasTrend {
    pub low_bias: f64,
    pub high_bias: f64,
    pub drops: BTreeMap<String, f64>,
}

pub fn bias_trend(groups: &[GroupSummary]) -> Option<BiasTrend> {
    let low = groups.iter().map(|g| g.bias).reduce(f64::min)?;
    let high = groups.iter().map(|g| g.bias).reduce(f64::max)?;
    let at = |arm: Arm, b: f64| {
        groups
            .iter()
            .find(|g| g.arm == arm && g.bias == b)
            .and_then(|g| g.mean_accuracy)
    };
    let mut drops = BTreeMap::new();
    for arm in Arm::ALL {
        if let (Some(a), Some(b)) = (at(arm, low), at(arm, high)) {
            drops.insert(arm.name().to_string(), a - b);
        }
    }
    Some(BiasTrend {
        low_bias: low,
        high_bias: high,
        drops,
    })
}

/// Best λ against the λ = 0 baseline and the largest λ, for one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaTrend {
    pub arm: Arm,
    pub baseline: f64,
    pub best_lambda: f64,
    pub best: f64,
    pub largest_lambda: f64,
    pub largest: f64,
}

pub fn lambda_trend(groups: &[GroupSummary], arm: Arm) -> Option<LambdaTrend> {
    let mine: Vec<(f64, f64)> = groups
        .iter()
        .filter(|g| g.arm == arm)
        .filter_map(|g| g.mean_accuracy.map(|a| (g.lambda, a)))
        .collect();
    let baseline = mine.iter().find(|(l, _)| *l == 0.0)?.1;
    let (best_lambda, best) = mine
        .iter()
        .copied()
        .reduce(|a, b| if b.1 > a.1 { b } else { a })?;
    let (largest_lambda, largest) = mine
        .iter()
        .copied()
        .reduce(|a, b| if b.0 > a.0 { b } else { a })?;
    Some(LambdaTrend {
        arm,
        baseline,
        best_lambda,
        best,
        largest_lambda,
        largest,
    })
}

/// One line of a verification report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckResult {
    fn at_most(name: &str, measured: f64, threshold: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            passed: measured <= threshold,
            measured,
            threshold,
            detail,
        }
    }

    fn below(name: &str, measured: f64, threshold: f64, detail: String) -> Self {
        Self {
            passed: measured < threshold,
            ..Self::at_most(name, measured, threshold, detail)
        }
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    Matrix::new(rows, cols, data).expect("finite by construction")
}

fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn random_kernel(rng: &mut ChaCha8Rng) -> Result<KernelSpec> {
    let k = rng.random_range(1..=4);
    let bandwidths = (0..k).map(|_| rng.random_range(0.2..3.0)).collect();
    KernelSpec::new(bandwidths, random_simplex(rng, k))
}

fn relative_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

/// With `α ≡ 1`, both weighted estimators against their unweighted versions
/// on `fixtures` random inputs. Measures the largest relative gap.
pub fn check_reduction(fixtures: usize, tolerance: f64, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..fixtures {
        let d = rng.random_range(1..=5);
        let m = rng.random_range(2..=40);
        let n = rng.random_range(2..=40);
        let c = rng.random_range(1..=4);
        let xs = random_matrix(&mut rng, m, d);
        let xt = random_matrix(&mut rng, n, d);
        let ys: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
        let spec = random_kernel(&mut rng)?;
        let w = AuxWeights::ones(random_simplex(&mut rng, c))?;
        worst = worst
            .max(relative_gap(
                wmmd2_quadratic(&xs, &ys, &xt, &w, &spec)?,
                mmd2_quadratic(&xs, &xt, &spec)?,
            ))
            .max(relative_gap(
                wmmd2_linear(&xs, &ys, &xt, &w, &spec)?,
                mmd2_linear(&xs, &xt, &spec)?,
            ));
    }
    Ok(CheckResult::at_most(
        "reduction",
        worst,
        tolerance,
        format!("{fixtures} fixtures, quadratic and linear"),
    ))
}

/// Mean of the linear estimator over row shuffles against the U-statistic,
/// in Monte-Carlo standard errors.
pub fn shuffled_linear_gap(src: &Matrix, tgt: &Matrix, spec: &KernelSpec, shuffles: usize, seed: u64) -> Result<f64> {
    let u = mmd2_unbiased(src, tgt, spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut si: Vec<usize> = (0..src.rows()).collect();
    let mut ti: Vec<usize> = (0..tgt.rows()).collect();
    let mut vals = Vec::with_capacity(shuffles);
    for _ in 0..shuffles {
        si.shuffle(&mut rng);
        ti.shuffle(&mut rng);
        vals.push(mmd2_linear(&src.select_rows(&si)?, &tgt.select_rows(&ti)?, spec)?);
    }
    let (mean, se) = mean_and_std_err(&vals);
    let (mean, se) = (mean.unwrap_or(f64::NAN), se.unwrap_or(f64::NAN));
    if se == 0.0 {
        return Ok(if mean == u { 0.0 } else { f64::INFINITY });
    }
    Ok((mean - u).abs() / se)
}

/// Linear-vs-U agreement on same-distribution, mean-shift and prior-shift pairs.
pub fn check_linear_unbiased(shuffles: usize, size: usize, max_se: f64, seed: u64) -> Result<Vec<CheckResult>> {
    let base = MixtureSpec::simplex(2, 2, 1.5)?;
    let settings = [
        ("same-distribution", base.without_shift(), [0.5, 0.5]),
        ("mean-shift", base.clone(), [0.5, 0.5]),
        ("prior-shift", base.without_shift(), [0.8, 0.2]),
    ];
    settings
        .iter()
        .enumerate()
        .map(|(i, (name, spec, priors))| {
            let pair = make_bias_pair(spec, priors, size, size, seed.wrapping_add(i as u64))?;
            let src = &pair.source.features;
            let tgt = pair.target.features();
            let kernel = KernelSpec::from_data(&src.vstack(tgt)?)?;
            let z = shuffled_linear_gap(src, tgt, &kernel, shuffles, seed ^ (i as u64 + 1))?;
            Ok(CheckResult::at_most(
                &format!("linear-unbiased/{name}"),
                z,
                max_se,
                format!("{shuffles} shuffles of {size}+{size} rows, gap in standard errors"),
            ))
        })
        .collect()
}

/// Plain and true-ratio weighted quadratic MMD² on one prior-shifted pair
/// with shared conditionals.
pub fn oracle_pair(size: usize, seed: u64) -> Result<(f64, f64)> {
    let spec = MixtureSpec::simplex(2, 2, 2.0)?.without_shift();
    let target = [0.8, 0.2];
    let pair = make_bias_pair(&spec, &target, size, size, seed)?;
    let src = &pair.source;
    let tgt = pair.target.features();
    let kernel = KernelSpec::from_data(&src.features.vstack(tgt)?)?;
    let w = AuxWeights::new(vec![0.5, 0.5], target.to_vec(), vec![1.6, 0.4])?;
    let plain = mmd2_quadratic(&src.features, tgt, &kernel)?;
    let weighted = wmmd2_quadratic(&src.features, src.labels()?, tgt, &w, &kernel)?;
    Ok((plain, weighted))
}

/// Ratio of seed-averaged weighted to plain MMD² under pure prior shift.
pub fn check_oracle_correction(size: usize, seeds: usize, max_ratio: f64, seed: u64) -> Result<CheckResult> {
    let pairs: Vec<(f64, f64)> = (0..seeds as u64)
        .into_par_iter()
        .map(|s| oracle_pair(size, seed.wrapping_add(s)))
        .collect::<Result<_>>()?;
    let plain = pairs.iter().map(|p| p.0).sum::<f64>() / seeds as f64;
    let weighted = pairs.iter().map(|p| p.1).sum::<f64>() / seeds as f64;
    Ok(CheckResult::below(
        "oracle-correction",
        weighted / plain,
        max_ratio,
        format!("n = {size}, {seeds} seeds: mean MMD² {plain:.4e}, mean WMMD² {weighted:.4e}"),
    ))
}

/// Every estimator check, seeded from the first configured seed.
pub fn run_estimator_check(cfg: &RunConfig) -> Result<Vec<CheckResult>> {
    cfg.validate()?;
    let e = &cfg.estimator;
    let seed = cfg.seeds[0];
    let mut out = vec![check_reduction(e.fixtures, e.reduction_tolerance, seed)?];
    out.extend(check_linear_unbiased(e.shuffles, e.shuffle_size, e.max_standard_errors, seed)?);
    out.push(check_oracle_correction(e.oracle_size, e.oracle_seeds, e.max_oracle_ratio, seed)?);
    Ok(out)
}

/// Finite-difference comparison for one random configuration. Term errors
/// are `None` when the term is switched off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCase {
    pub index: usize,
    pub activation: Activation,
    pub hidden_dims: Vec<usize>,
    pub tap_layers: Vec<usize>,
    pub source_rows: usize,
    pub target_rows: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub alphas: Vec<f64>,
    pub parameters: usize,
    /// Parameters skipped because a ReLU input changed sign within the step.
    pub skipped: usize,
    pub source_ce: f64,
    pub target_ce: Option<f64>,
    pub wmmd: Option<f64>,
    pub total: f64,
}

impl GradientCase {
    pub fn max_error(&self) -> f64 {
        [Some(self.source_ce), self.target_ce, self.wmmd, Some(self.total)]
            .into_iter()
            .flatten()
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub cases: Vec<GradientCase>,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn fd_relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn grad_flat(
    p: &ModelParams,
    batch: &(Matrix, Vec<usize>, Matrix, Vec<usize>),
    w: &AuxWeights,
    kernels: &[KernelSpec],
    lambda: f64,
    gamma: f64,
) -> Result<Vec<f64>> {
    let obj = Objective {
        weights: w,
        kernels,
        lambda,
        gamma,
    };
    Ok(loss_and_grad(p, &batch.0, &batch.1, &batch.2, &batch.3, &obj)?.1.flatten())
}

fn same_relu_pattern(a: &[Matrix], b: &[Matrix]) -> bool {
    let hidden = a.len() - 1;
    a[..hidden]
        .iter()
        .zip(&b[..hidden])
        .all(|(x, y)| x.as_slice().iter().zip(y.as_slice()).all(|(u, v)| (*u > 0.0) == (*v > 0.0)))
}

/// Random model, batch, `α`, λ and γ for case `index`. Case 0 has λ = γ = 0
/// and case 1 has λ = 0.
pub fn gradient_case(index: usize, step: f64, seed: u64) -> Result<GradientCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let activation = if index % 2 == 0 { Activation::Tanh } else { Activation::Relu };
    let input_dim = rng.random_range(1..=4);
    let class_count = rng.random_range(2..=4);
    let depth = rng.random_range(1..=2);
    let hidden_dims: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=6)).collect();
    let first = rng.random_range(0..=depth);
    let last = rng.random_range(first..=depth);
    let config = ModelConfig {
        input_dim,
        hidden_dims: hidden_dims.clone(),
        class_count,
        tap_layers: (first..=last).collect(),
        activation,
    };
    let params = ModelParams::init(&config, rng.random())?;
    let m = rng.random_range(2..=12);
    let n = rng.random_range(2..=12);
    let batch = (
        random_matrix(&mut rng, m, input_dim),
        (0..m).map(|_| rng.random_range(0..class_count)).collect::<Vec<_>>(),
        random_matrix(&mut rng, n, input_dim),
        (0..n).map(|_| rng.random_range(0..class_count)).collect::<Vec<_>>(),
    );
    let source_priors = random_simplex(&mut rng, class_count);
    let alphas: Vec<f64> = (0..class_count).map(|_| rng.random_range(0.1..3.0)).collect();
    let mass: f64 = source_priors.iter().zip(&alphas).map(|(w, a)| w * a).sum();
    let target_priors = source_priors.iter().zip(&alphas).map(|(w, a)| w * a / mass).collect();
    let w = AuxWeights::new(source_priors, target_priors, alphas.clone())?;
    let kernels: Vec<KernelSpec> = config
        .tap_layers
        .iter()
        .map(|_| {
            if rng.random_bool(0.5) {
                KernelSpec::single(rng.random_range(0.3..3.0))
            } else {
                KernelSpec::multi_scale(rng.random_range(0.3..3.0), &DEFAULT_MULTIPLIERS)
            }
        })
        .collect::<Result<_>>()?;
    let (lambda, gamma) = match index {
        0 => (0.0, 0.0),
        1 => (0.0, rng.random_range(0.1..1.0)),
        _ => (
            LAMBDA_GRID[rng.random_range(1..LAMBDA_GRID.len())],
            rng.random_range(0.1..1.0),
        ),
    };

    let full = grad_flat(&params, &batch, &w, &kernels, lambda, gamma)?;
    let src_only = grad_flat(&params, &batch, &w, &kernels, 0.0, 0.0)?;
    let tgt_term: Option<Vec<f64>> = if gamma > 0.0 {
        let g = grad_flat(&params, &batch, &w, &kernels, 0.0, gamma)?;
        Some(g.iter().zip(&src_only).map(|(a, b)| (a - b) / gamma).collect())
    } else {
        None
    };
    let wmmd_term: Option<Vec<f64>> = if lambda > 0.0 {
        let g = grad_flat(&params, &batch, &w, &kernels, lambda, 0.0)?;
        Some(g.iter().zip(&src_only).map(|(a, b)| (a - b) / lambda).collect())
    } else {
        None
    };

    let obj = Objective {
        weights: &w,
        kernels: &kernels,
        lambda,
        gamma,
    };
    let base_s = forward(&params, &batch.0)?;
    let base_t = forward(&params, &batch.2)?;
    let eval = |p: &ModelParams| -> Result<Option<(f64, f64, f64, f64)>> {
        let s = forward(p, &batch.0)?;
        let t = forward(p, &batch.2)?;
        if activation == Activation::Relu
            && !(same_relu_pattern(&s.pre, &base_s.pre) && same_relu_pattern(&t.pre, &base_t.pre))
        {
            return Ok(None);
        }
        let l = loss_from_traces(&s, &batch.1, &t, &batch.3, &p.config, &obj)?;
        Ok(Some((l.source_ce, l.target_ce, l.wmmd.iter().sum(), l.total)))
    };

    let mut errs = [0.0f64; 4];
    let mut skipped = 0;
    for i in 0..params.parameter_count() {
        let mut pp = params.clone();
        *pp.parameter_mut(i).expect("index in range") += step;
        let mut pm = params.clone();
        *pm.parameter_mut(i).expect("index in range") -= step;
        let (Some(hi), Some(lo)) = (eval(&pp)?, eval(&pm)?) else {
            skipped += 1;
            continue;
        };
        let fd = |a: f64, b: f64| (a - b) / (2.0 * step);
        errs[0] = errs[0].max(fd_relative_error(src_only[i], fd(hi.0, lo.0)));
        if let Some(g) = &tgt_term {
            errs[1] = errs[1].max(fd_relative_error(g[i], fd(hi.1, lo.1)));
        }
        if let Some(g) = &wmmd_term {
            errs[2] = errs[2].max(fd_relative_error(g[i], fd(hi.2, lo.2)));
        }
        errs[3] = errs[3].max(fd_relative_error(full[i], fd(hi.3, lo.3)));
    }
    Ok(GradientCase {
        index,
        activation,
        hidden_dims,
        tap_layers: config.tap_layers.clone(),
        source_rows: m,
        target_rows: n,
        lambda,
        gamma,
        alphas,
        parameters: params.parameter_count(),
        skipped,
        source_ce: errs[0],
        target_ce: tgt_term.map(|_| errs[1]),
        wmmd: wmmd_term.map(|_| errs[2]),
        total: errs[3],
    })
}

pub fn run_gradient_check(cfg: &RunConfig) -> Result<GradientReport> {
    cfg.validate()?;
    let g = &cfg.gradient;
    if g.cases == 0 {
        return Err(Error::Parameter("gradient check needs at least one case".into()));
    }
    let seed = cfg.seeds[0];
    let cases: Vec<GradientCase> = (0..g.cases)
        .into_par_iter()
        .map(|i| gradient_case(i, g.step, seed))
        .collect::<Result<_>>()?;
    let max_relative_error = cases.iter().map(GradientCase::max_error).fold(0.0, f64::max);
    Ok(GradientReport {
        passed: max_relative_error < g.tolerance,
        cases,
        max_relative_error,
        tolerance: g.tolerance,
    })
}

/// A trained single run with its pair's target accuracy.
#[derive(Debug, Clone)]
pub struct SingleRun {
    pub seed: u64,
    pub state: TrainState,
    pub accuracy: f64,
}

/// Trains `cfg.arm` on the `cfg.bias` pair for every seed, scoring the target
/// after each epoch.
pub fn run_single_train(cfg: &RunConfig) -> Result<Vec<SingleRun>> {
    cfg.validate()?;
    let c = cfg.mixture.class_count;
    cfg.seeds
        .par_iter()
        .map(|&seed| {
            let pair = make_bias_pair(&cfg.mixture, &bias_priors(cfg.bias, c), cfg.source_size, cfg.target_size, seed)?;
            let tc = cfg.arm.configure(&TrainConfig {
                seed,
                ..cfg.train.clone()
            });
            let eval_set = pair.target.evaluation_set();
            let state = train_monitored(
                &pair.source,
                pair.target.features(),
                &cfg.model_config(),
                &tc,
                &cfg.kernels,
                &eval_set,
            )?;
            let accuracy = evaluate(&state.params, &eval_set)?.accuracy;
            Ok(SingleRun { seed, state, accuracy })
        })
        .collect()
}

/// A fresh `run-NNN` directory under an output root. Files inside are
/// created exclusively, so nothing is ever overwritten.
#[derive(Debug, Clone)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        fs::create_dir_all(root)?;
        let mut next = fs::read_dir(root)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str()?.strip_prefix("run-")?.parse::<u32>().ok())
            .max()
            .map_or(1, |n| n + 1);
        loop {
            let path = root.join(format!("run-{next:03}"));
            match fs::create_dir(&path) {
                Ok(()) => return Ok(Self { path }),
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => next += 1,
                Err(e) => return Err(e.into()),
            }
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn create_file(&self, name: &str) -> Result<File> {
        Ok(OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(self.path.join(name))?)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut f = self.create_file(name)?;
        serde_json::to_writer_pretty(&mut f, value)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    fn csv(&self, name: &str) -> Result<csv::Writer<File>> {
        Ok(csv::Writer::from_writer(self.create_file(name)?))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// `results.csv`, `loss_history.csv` and `summary.json` for a sweep.
pub fn write_sweep(dir: &RunDir, kind: ExperimentKind, rows: &[SweepRow], class_count: usize) -> Result<()> {
    let mut w = dir.csv("results.csv")?;
    let mut header = vec!["bias".to_string(), "lambda".into(), "arm".into(), "seed".into(), "status".into(), "accuracy".into()];
    header.extend((0..class_count).map(|c| format!("alpha_{c}")));
    header.push("error".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.bias.to_string(),
            r.lambda.to_string(),
            r.arm.name().to_string(),
            r.seed.to_string(),
            if r.failed() { "failed" } else { "ok" }.to_string(),
            fmt_opt(r.accuracy),
        ];
        rec.extend((0..class_count).map(|c| fmt_opt(r.alphas.get(c).copied())));
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = dir.csv("loss_history.csv")?;
    w.write_record(["bias", "lambda", "arm", "seed", "epoch", "loss"])?;
    for r in rows {
        for (e, l) in r.loss_history.iter().enumerate() {
            w.write_record([
                r.bias.to_string(),
                r.lambda.to_string(),
                r.arm.name().to_string(),
                r.seed.to_string(),
                (e + 1).to_string(),
                l.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let groups = summarize(rows);
    let summary = SweepSummary {
        kind,
        rows: rows.len(),
        failed: rows.iter().filter(|r| r.failed()).count(),
        bias_trend: (kind == ExperimentKind::BiasSweep).then(|| bias_trend(&groups)).flatten(),
        lambda_trends: if kind == ExperimentKind::LambdaSweep {
            [Arm::Dan, Arm::Wdan].into_iter().filter_map(|a| lambda_trend(&groups, a)).collect()
        } else {
            Vec::new()
        },
        groups,
    };
    dir.write_json("summary.json", &summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub kind: ExperimentKind,
    pub rows: usize,
    pub failed: usize,
    pub groups: Vec<GroupSummary>,
    pub bias_trend: Option<BiasTrend>,
    pub lambda_trends: Vec<LambdaTrend>,
}

/// `checks.csv` and `report.json`.
pub fn write_checks(dir: &RunDir, checks: &[CheckResult]) -> Result<()> {
    let mut w = dir.csv("checks.csv")?;
    w.write_record(["check", "status", "measured", "threshold", "detail"])?;
    for c in checks {
        w.write_record([
            c.name.clone(),
            if c.passed { "pass" } else { "fail" }.into(),
            c.measured.to_string(),
            c.threshold.to_string(),
            c.detail.clone(),
        ])?;
    }
    w.flush()?;
    dir.write_json("report.json", &checks)
}

/// `gradient_cases.csv` and `report.json`.
pub fn write_gradient_report(dir: &RunDir, report: &GradientReport) -> Result<()> {
    let mut w = dir.csv("gradient_cases.csv")?;
    w.write_record([
        "case", "activation", "hidden", "taps", "source_rows", "target_rows", "lambda", "gamma", "parameters",
        "skipped", "source_ce", "target_ce", "wmmd", "total",
    ])?;
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
    for c in &report.cases {
        w.write_record([
            c.index.to_string(),
            format!("{:?}", c.activation).to_lowercase(),
            join(&c.hidden_dims),
            join(&c.tap_layers),
            c.source_rows.to_string(),
            c.target_rows.to_string(),
            c.lambda.to_string(),
            c.gamma.to_string(),
            c.parameters.to_string(),
            c.skipped.to_string(),
            c.source_ce.to_string(),
            fmt_opt(c.target_ce),
            fmt_opt(c.wmmd),
            c.total.to_string(),
        ])?;
    }
    w.flush()?;
    dir.write_json("report.json", report)
}

/// `results.csv`, `epochs.csv` and one checkpoint per seed.
pub fn write_single_runs(dir: &RunDir, cfg: &RunConfig, runs: &[SingleRun]) -> Result<()> {
    let rows: Vec<SweepRow> = runs
        .iter()
        .map(|r| SweepRow {
            bias: cfg.bias,
            lambda: cfg.train.lambda,
            arm: cfg.arm,
            seed: r.seed,
            accuracy: Some(r.accuracy),
            alphas: r.state.weights.normalized_alphas(),
            loss_history: r.state.loss_history.clone(),
            error: None,
        })
        .collect();
    let class_count = cfg.mixture.class_count;
    write_sweep(dir, ExperimentKind::SingleTrain, &rows, class_count)?;

    let mut w = dir.csv("epochs.csv")?;
    let mut header: Vec<String> = ["seed", "epoch", "loss", "source_ce", "target_ce", "wmmd", "target_accuracy"]
        .map(String::from)
        .to_vec();
    header.extend((0..class_count).map(|c| format!("alpha_{c}")));
    w.write_record(&header)?;
    for r in runs {
        for e in &r.state.records {
            let mut rec = vec![
                r.seed.to_string(),
                e.epoch.to_string(),
                e.loss.to_string(),
                e.source_ce.to_string(),
                e.target_ce.to_string(),
                e.wmmd.to_string(),
                fmt_opt(e.target_accuracy),
            ];
            rec.extend(e.alphas.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        save_checkpoint(&r.state.params, dir.path().join(format!("model-seed-{}.json", r.seed)))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig {
            source_size: 60,
            target_size: 60,
            hidden_dims: vec![8],
            tap_layers: vec![0, 1],
            train: TrainConfig {
                epochs: 3,
                batch_size: 16,
                ..TrainConfig::default()
            },
            seeds: vec![1, 2],
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial = RunConfig::from_json(r#"{"kind": "bias-sweep", "seeds": [3]}"#).unwrap();
        assert_eq!(partial.kind, ExperimentKind::BiasSweep);
        assert_eq!(partial.seeds, vec![3]);
        assert_eq!(partial.mixture, cfg.mixture);
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(RunConfig::from_json(r#"{"seeds": []}"#).is_err());
        assert!(RunConfig::from_json(r#"{"bias": 1.5}"#).is_err());
        assert!(RunConfig::from_json(r#"{"lambdas": [-1]}"#).is_err());
        assert!(RunConfig::from_json(r#"{"unknown": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"tap_layers": [7]}"#).is_err());
    }

    #[test]
    fn bias_priors_put_the_bias_on_class_zero() {
        assert_eq!(bias_priors(0.8, 2), vec![0.8, 0.19999999999999996]);
        let p = bias_priors(0.7, 4);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p[0], 0.7);
        assert_eq!(bias_priors(0.3, 1), vec![1.0]);
    }

    #[test]
    fn bias_sweep_row_count() {
        let cfg = RunConfig {
            biases: vec![0.5, 0.9],
            ..tiny()
        };
        let rows = run_bias_sweep(&cfg).unwrap();
        assert_eq!(rows.len(), 2 * 3 * 2);
        assert!(rows.iter().all(|r| !r.failed() && r.loss_history.len() == 3));
        let groups = summarize(&rows);
        assert_eq!(groups.len(), 6);
        assert!(groups.iter().all(|g| g.runs == 2 && g.std_err.is_some()));
        let trend = bias_trend(&groups).unwrap();
        assert_eq!(trend.drops.len(), 3);
    }

    #[test]
    fn failed_cells_are_marked_and_the_sweep_continues() {
        let mut cfg = RunConfig {
            biases: vec![0.5, 0.9],
            ..tiny()
        };
        cfg.train.learning_rate = f64::MAX;
        let rows = run_bias_sweep(&cfg).unwrap();
        assert_eq!(rows.len(), 12);
        let failed: Vec<&SweepRow> = rows.iter().filter(|r| r.failed()).collect();
        assert!(!failed.is_empty());
        assert!(failed.iter().all(|r| r.accuracy.is_none() && r.loss_history.is_empty()));
        let groups = summarize(&rows);
        assert_eq!(groups.iter().map(|g| g.failed).sum::<usize>(), failed.len());
    }

    #[test]
    fn lambda_zero_rows_agree_across_arms() {
        let cfg = RunConfig {
            lambdas: vec![0.0, 0.4],
            ..tiny()
        };
        let rows = run_lambda_sweep(&cfg).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 2);
        for seed in [1, 2] {
            let pick = |arm| {
                rows.iter()
                    .find(|r| r.lambda == 0.0 && r.arm == arm && r.seed == seed)
                    .unwrap()
            };
            assert_eq!(pick(Arm::Dan).accuracy, pick(Arm::Wdan).accuracy);
            assert_eq!(pick(Arm::Dan).loss_history, pick(Arm::Wdan).loss_history);
        }
        let t = lambda_trend(&summarize(&rows), Arm::Wdan).unwrap();
        assert_eq!(t.largest_lambda, 0.4);
    }

    #[test]
    fn std_err_of_known_values() {
        let (m, se) = mean_and_std_err(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, Some(2.5));
        assert!((se.unwrap() - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_and_std_err(&[2.0]), (Some(2.0), None));
        assert_eq!(mean_and_std_err(&[]), (None, None));
    }

    #[test]
    fn reduction_check_is_exact() {
        let c = check_reduction(20, 1e-12, 4).unwrap();
        assert!(c.passed, "{c:?}");
    }

    #[test]
    fn gradient_cases_cover_the_subcases() {
        let c0 = gradient_case(0, 1e-5, 7).unwrap();
        assert_eq!((c0.lambda, c0.gamma), (0.0, 0.0));
        assert!(c0.target_ce.is_none() && c0.wmmd.is_none());
        assert!(c0.max_error() < 1e-4, "{c0:?}");
        let c1 = gradient_case(1, 1e-5, 7).unwrap();
        assert_eq!(c1.lambda, 0.0);
        assert!(c1.target_ce.is_some() && c1.wmmd.is_none());
        let c2 = gradient_case(2, 1e-5, 7).unwrap();
        assert!(c2.target_ce.is_some() && c2.wmmd.is_some());
        assert!(c2.max_error() < 1e-4, "{c2:?}");
    }

    #[test]
    fn run_dirs_are_numbered_and_never_reused() {
        let root = tempfile::tempdir().unwrap();
        let a = RunDir::create(root.path()).unwrap();
        let b = RunDir::create(root.path()).unwrap();
        assert!(a.path().ends_with("run-001"));
        assert!(b.path().ends_with("run-002"));
        a.write_json("x.json", &1).unwrap();
        assert!(a.write_json("x.json", &2).is_err());
        assert_eq!(fs::read_to_string(a.path().join("x.json")).unwrap(), "1\n");
    }
}
