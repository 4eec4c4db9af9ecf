//! Classification-EM training: each epoch computes target posteriors
//! (E-step), hard-assigns pseudo-labels and re-estimates the class weights
//! (C-step), then runs one pass of mini-batch SGD with momentum on the
//! weighted objective (M-step).
//!
//! Pseudo-labels and `α` are frozen for the whole M-step. `α` starts at one
//! and the first epoch keeps it there, so epoch 1 regularizes with the
//! unweighted MMD.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{median_heuristic, KernelSpec, DEFAULT_MULTIPLIERS};
use crate::mmd::AuxWeights;
use crate::model::{argmax_rows, forward, loss_and_grad, ModelConfig, ModelParams, Objective};
use crate::numerics::{Gradients, Matrix};

/// Regularizer grid searched for λ.
pub const LAMBDA_GRID: [f64; 10] = [0.0, 0.03, 0.07, 0.1, 0.4, 0.7, 1.0, 1.4, 1.7, 2.0];
/// Grid searched for γ.
pub const GAMMA_GRID: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

const INIT_SALT: u64 = 0x696e_6974;
const SHUFFLE_SALT: u64 = 0x7368_7566;

/// How `α` is maintained across epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaMode {
    /// Re-estimated from pseudo-labels every C-step (weighted MMD).
    #[default]
    Estimated,
    /// Held at one (plain MMD).
    Uniform,
}

/// The three experimental arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// λ = γ = 0.
    SrcOnly,
    /// Unweighted MMD: α frozen at one.
    Dan,
    /// Weighted MMD with estimated α.
    Wdan,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::SrcOnly, Arm::Dan, Arm::Wdan];

    pub fn name(self) -> &'static str {
        match self {
            Arm::SrcOnly => "src-only",
            Arm::Dan => "dan",
            Arm::Wdan => "wdan",
        }
    }

    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Arm::SrcOnly => {
                c.lambda = 0.0;
                c.gamma = 0.0;
                c.alpha_mode = AlphaMode::Uniform;
            }
            Arm::Dan => c.alpha_mode = AlphaMode::Uniform,
            Arm::Wdan => c.alpha_mode = AlphaMode::Estimated,
        }
        c
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub alpha_smoothing: f64,
    pub alpha_mode: AlphaMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.4,
            gamma: 0.0,
            batch_size: 64,
            epochs: 30,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            alpha_smoothing: 1e-3,
            alpha_mode: AlphaMode::Estimated,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Parameter(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Parameter(format!("gamma {} must be >= 0", self.gamma)));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Parameter(format!(
                "batch size {} must be even and at least 2",
                self.batch_size
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Parameter("learning rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter("momentum must lie in [0, 1)".into()));
        }
        if !(self.alpha_smoothing.is_finite() && self.alpha_smoothing >= 0.0) {
            return Err(Error::Parameter("alpha smoothing must be >= 0".into()));
        }
        Ok(())
    }
}

/// Where the per-tap kernels come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum KernelSchedule {
    /// Bandwidths `median × multiplier`, uniform β, refreshed every epoch
    /// from the current tap features of both domains.
    Adaptive { multipliers: Vec<f64> },
    /// The same kernel on every tap, never refreshed.
    Fixed { spec: KernelSpec },
}

impl Default for KernelSchedule {
    fn default() -> Self {
        KernelSchedule::Adaptive {
            multipliers: DEFAULT_MULTIPLIERS.to_vec(),
        }
    }
}

impl KernelSchedule {
    fn kernels_for(&self, params: &ModelParams, src: &Matrix, tgt: &Matrix) -> Result<Vec<KernelSpec>> {
        let taps = &params.config.tap_layers;
        match self {
            KernelSchedule::Fixed { spec } => Ok(vec![spec.clone(); taps.len()]),
            KernelSchedule::Adaptive { multipliers } => {
                let both = src.vstack(tgt)?;
                let trace = forward(params, &both)?;
                taps.iter()
                    .map(|&l| KernelSpec::multi_scale(median_heuristic(trace.features(l))?, multipliers))
                    .collect()
            }
        }
    }
}

/// Per-epoch log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub source_ce: f64,
    pub target_ce: f64,
    pub wmmd: f64,
    pub alphas: Vec<f64>,
    pub target_priors: Vec<f64>,
    pub target_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub weights: AuxWeights,
    pub pseudo_labels: Vec<usize>,
    /// Completed epochs.
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    pub records: Vec<EpochRecord>,
    velocity: Gradients,
}

impl TrainState {
    pub fn new(params: ModelParams, source_priors: Vec<f64>, target_len: usize) -> Result<Self> {
        let velocity = params.zero_gradients();
        Ok(Self {
            weights: AuxWeights::ones(source_priors)?,
            params,
            pseudo_labels: vec![0; target_len],
            epoch: 0,
            loss_history: Vec::new(),
            records: Vec::new(),
            velocity,
        })
    }
}

/// `w_c^s = M_c / M`
pub fn estimate_source_priors(labels: &[usize], class_count: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::Data("cannot estimate priors from no labels".into()));
    }
    let mut counts = vec![0usize; class_count];
    for &y in labels {
        *counts.get_mut(y).ok_or(Error::Index {
            index: y,
            len: class_count,
        })? += 1;
    }
    let m = labels.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / m).collect())
}

/// Target class posteriors: the classifier's softmax output.
pub fn e_step(params: &ModelParams, tgt: &Matrix) -> Result<Matrix> {
    Ok(forward(params, tgt)?.probs)
}

/// Argmax pseudo-labels, their class frequencies `ŵ^t`, and
/// `α_c = (ŵ_c^t + ε) / (w_c^s + ε)`.
pub fn c_step(posteriors: &Matrix, source_priors: &[f64], smoothing: f64) -> Result<(Vec<usize>, AuxWeights)> {
    if posteriors.cols() != source_priors.len() {
        return Err(Error::Shape(format!(
            "{} posterior columns for {} classes",
            posteriors.cols(),
            source_priors.len()
        )));
    }
    if posteriors.rows() == 0 {
        return Err(Error::Data("no target samples".into()));
    }
    let labels = argmax_rows(posteriors);
    let target_priors = estimate_source_priors(&labels, source_priors.len())?;
    let weights = AuxWeights::from_priors(source_priors.to_vec(), target_priors, smoothing)?;
    Ok((labels, weights))
}

/// Mean loss terms over one M-step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochLoss {
    pub total: f64,
    pub source_ce: f64,
    pub target_ce: f64,
    pub wmmd: f64,
}

fn check_domains<'a>(src: &'a Dataset, tgt: &Matrix) -> Result<&'a [usize]> {
    let labels = src.labels()?;
    if src.dim() != tgt.cols() {
        return Err(Error::Shape(format!(
            "source has {} features, target has {}",
            src.dim(),
            tgt.cols()
        )));
    }
    if src.len() < 2 || tgt.rows() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 samples per domain, got {} and {}",
            src.len(),
            tgt.rows()
        )));
    }
    Ok(labels)
}

/// One epoch of shuffled mini-batch SGD with momentum. The shuffle order is
/// a function of `(config.seed, state.epoch)` only.
pub fn m_step(
    state: &mut TrainState,
    src: &Dataset,
    tgt: &Matrix,
    config: &TrainConfig,
    kernels: &[KernelSpec],
) -> Result<EpochLoss> {
    config.validate()?;
    let src_labels = check_domains(src, tgt)?;
    if state.pseudo_labels.len() != tgt.rows() {
        return Err(Error::Data("pseudo-labels do not cover the target set".into()));
    }
    let (m, n) = (src.len(), tgt.rows());
    let batch = config.batch_size.min(m).min(n) / 2 * 2;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
    rng.set_stream(state.epoch as u64);
    let mut src_order: Vec<usize> = (0..m).collect();
    let mut tgt_order: Vec<usize> = (0..n).collect();
    src_order.shuffle(&mut rng);
    tgt_order.shuffle(&mut rng);

    let steps = m.max(n).div_ceil(batch);
    let mut acc = EpochLoss::default();
    for step in 0..steps {
        let si: Vec<usize> = (0..batch).map(|k| src_order[(step * batch + k) % m]).collect();
        let ti: Vec<usize> = (0..batch).map(|k| tgt_order[(step * batch + k) % n]).collect();
        let xs = src.features.select_rows(&si)?;
        let ys: Vec<usize> = si.iter().map(|&i| src_labels[i]).collect();
        let xt = tgt.select_rows(&ti)?;
        let yt: Vec<usize> = ti.iter().map(|&i| state.pseudo_labels[i]).collect();
        let obj = Objective {
            weights: &state.weights,
            kernels,
            lambda: config.lambda,
            gamma: config.gamma,
        };
        let (l, g) = loss_and_grad(&state.params, &xs, &ys, &xt, &yt, &obj)?;

        // v ← μv − η∇,  θ ← θ + v
        for (v, gw) in state.velocity.weights.iter_mut().zip(&g.weights) {
            v.scale(config.momentum);
            v.add_scaled(gw, -config.learning_rate)?;
        }
        for (v, gb) in state.velocity.biases.iter_mut().zip(&g.biases) {
            for (a, b) in v.iter_mut().zip(gb) {
                *a = config.momentum * *a - config.learning_rate * b;
            }
        }
        let velocity = state.velocity.clone();
        state.params.apply(&velocity, 1.0)?;

        acc.total += l.total;
        acc.source_ce += l.source_ce;
        acc.target_ce += l.target_ce;
        acc.wmmd += l.wmmd.iter().sum::<f64>();
    }
    state.params.ensure_finite()?;
    let s = steps as f64;
    Ok(EpochLoss {
        total: acc.total / s,
        source_ce: acc.source_ce / s,
        target_ce: acc.target_ce / s,
        wmmd: acc.wmmd / s,
    })
}

/// Runs `config.epochs` rounds of E → C → M on labeled source data and
/// unlabeled target features.
pub fn train(
    src: &Dataset,
    tgt: &Matrix,
    model: &ModelConfig,
    config: &TrainConfig,
    kernels: &KernelSchedule,
) -> Result<TrainState> {
    train_inner(src, tgt, model, config, kernels, None)
}

/// [`train`], additionally scoring `monitor` after every epoch. The monitor
/// labels never reach the optimizer.
pub fn train_monitored(
    src: &Dataset,
    tgt: &Matrix,
    model: &ModelConfig,
    config: &TrainConfig,
    kernels: &KernelSchedule,
    monitor: &Dataset,
) -> Result<TrainState> {
    train_inner(src, tgt, model, config, kernels, Some(monitor))
}

fn train_inner(
    src: &Dataset,
    tgt: &Matrix,
    model: &ModelConfig,
    config: &TrainConfig,
    kernels: &KernelSchedule,
    monitor: Option<&Dataset>,
) -> Result<TrainState> {
    config.validate()?;
    model.validate()?;
    let labels = check_domains(src, tgt)?;
    if model.input_dim != src.dim() {
        return Err(Error::Shape(format!(
            "model expects {} features, data has {}",
            model.input_dim,
            src.dim()
        )));
    }
    let source_priors = estimate_source_priors(labels, model.class_count)?;
    let params = ModelParams::init(model, config.seed ^ INIT_SALT)?;
    let mut state = TrainState::new(params, source_priors.clone(), tgt.rows())?;

    for _ in 0..config.epochs {
        let posteriors = e_step(&state.params, tgt)?;
        let (pseudo, estimated) = c_step(&posteriors, &source_priors, config.alpha_smoothing)?;
        state.pseudo_labels = pseudo;
        state.weights = if state.epoch == 0 || config.alpha_mode == AlphaMode::Uniform {
            AuxWeights::new(
                source_priors.clone(),
                estimated.target_priors().to_vec(),
                vec![1.0; model.class_count],
            )?
        } else {
            estimated
        };

        let specs = if config.lambda > 0.0 {
            kernels.kernels_for(&state.params, &src.features, tgt)?
        } else {
            vec![KernelSpec::single(1.0)?; model.tap_layers.len()]
        };
        let l = m_step(&mut state, src, tgt, config, &specs)?;

        let target_accuracy = monitor
            .map(|d| evaluate(&state.params, d).map(|e| e.accuracy))
            .transpose()?;
        state.records.push(EpochRecord {
            epoch: state.epoch + 1,
            loss: l.total,
            source_ce: l.source_ce,
            target_ce: l.target_ce,
            wmmd: l.wmmd,
            alphas: state.weights.alphas().to_vec(),
            target_priors: state.weights.target_priors().to_vec(),
            target_accuracy,
        });
        state.loss_history.push(l.total);
        state.epoch += 1;
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate(params: &ModelParams, data: &Dataset) -> Result<Evaluation> {
    let labels = data.labels()?;
    if labels.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let pred = argmax_rows(&forward(params, &data.features)?.probs);
    score(&pred, labels, params.config.class_count)
}

/// Accuracy and confusion counts of `pred` against `truth`.
pub fn score(pred: &[usize], truth: &[usize], class_count: usize) -> Result<Evaluation> {
    if pred.len() != truth.len() {
        return Err(Error::Shape("prediction and label counts differ".into()));
    }
    if truth.is_empty() {
        return Err(Error::Data("cannot score an empty set".into()));
    }
    let mut confusion = vec![vec![0usize; class_count]; class_count];
    let mut correct = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        if t >= class_count || p >= class_count {
            return Err(Error::Index {
                index: t.max(p),
                len: class_count,
            });
        }
        confusion[t][p] += 1;
        correct += usize::from(p == t);
    }
    Ok(Evaluation {
        accuracy: correct as f64 / truth.len() as f64,
        confusion,
    })
}
