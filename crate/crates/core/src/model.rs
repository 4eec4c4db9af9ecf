//! Feedforward softmax classifier whose "tap" layers feed the weighted MMD
//! regularizer.
//!
//! Layers are numbered from 0. Layers `0..hidden_dims.len()` are hidden
//! (dense + activation) and the last layer produces the logits. The feature
//! a tap exposes is the post-activation output of a hidden layer, or the raw
//! logits for the final layer.
//!
//! The training objective on one source batch `(X_s, y_s)` and target batch
//! `(X_t, ŷ_t)` is
//!
//! ```text
//! mean CE(X_s, y_s) + γ · mean CE(X_t, ŷ_t) + λ · Σ_{l ∈ taps} WMMD²_linear(f_s^l, f_t^l)
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::mmd::{wmmd2_linear, wmmd2_linear_with_grad, AuxWeights};
use crate::numerics::{
    cross_entropy, dense_backward, dense_forward, softmax_cross_entropy_grad, softmax_rows, Activation,
    Gradients, Matrix,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub class_count: usize,
    /// Contiguous ascending layer indices whose outputs feed the regularizer.
    pub tap_layers: Vec<usize>,
    pub activation: Activation,
}

impl ModelConfig {
    /// Two hidden layers (64, 32) with taps on the last hidden layer and the logits.
    pub fn default_for(input_dim: usize, class_count: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![64, 32],
            class_count,
            tap_layers: vec![1, 2],
            activation: Activation::Relu,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    /// Output width of each layer.
    pub fn layer_widths(&self) -> Vec<usize> {
        let mut w = self.hidden_dims.clone();
        w.push(self.class_count);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.class_count == 0 {
            return Err(Error::Parameter("input_dim and class_count must be positive".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Parameter("hidden layers must have positive width".into()));
        }
        if self.tap_layers.is_empty() {
            return Err(Error::Parameter("at least one tap layer is required".into()));
        }
        if let Some(&bad) = self.tap_layers.iter().find(|&&l| l >= self.layer_count()) {
            return Err(Error::Parameter(format!(
                "tap layer {bad} out of range for {} layers",
                self.layer_count()
            )));
        }
        if self.tap_layers.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Parameter("tap layers must be contiguous and ascending".into()));
        }
        Ok(())
    }
}

/// Layer weights (`in × out`) and biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl ModelParams {
    /// Seeded Glorot-uniform weights, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fan_in = config.input_dim;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for fan_out in config.layer_widths() {
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-s..=s)).collect();
            weights.push(Matrix::new(fan_in, fan_out, data)?);
            biases.push(vec![0.0; fan_out]);
            fan_in = fan_out;
        }
        Ok(Self {
            config: config.clone(),
            weights,
            biases,
        })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut fan_in = config.input_dim;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for fan_out in config.layer_widths() {
            weights.push(Matrix::zeros(fan_in, fan_out));
            biases.push(vec![0.0; fan_out]);
            fan_in = fan_out;
        }
        Ok(Self {
            config: config.clone(),
            weights,
            biases,
        })
    }

    fn check_shapes(&self) -> Result<()> {
        self.config.validate()?;
        let widths = self.config.layer_widths();
        if self.weights.len() != widths.len() || self.biases.len() != widths.len() {
            return Err(Error::Shape("parameter layer count".into()));
        }
        let mut fan_in = self.config.input_dim;
        for ((w, b), &out) in self.weights.iter().zip(&self.biases).zip(&widths) {
            if w.shape() != (fan_in, out) || b.len() != out {
                return Err(Error::Shape(format!(
                    "layer expects {fan_in}x{out}, found {:?} with bias {}",
                    w.shape(),
                    b.len()
                )));
            }
            fan_in = out;
        }
        Ok(())
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients::zeros_like(&self.weights, &self.biases)
    }

    /// `params += scale · g`
    pub fn apply(&mut self, g: &Gradients, scale: f64) -> Result<()> {
        for (w, gw) in self.weights.iter_mut().zip(&g.weights) {
            w.add_scaled(gw, scale)?;
        }
        for (b, gb) in self.biases.iter_mut().zip(&g.biases) {
            b.iter_mut().zip(gb).for_each(|(x, y)| *x += scale * y);
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.as_slice().len()).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Mutable access to the `i`-th scalar parameter, in [`Gradients::flatten`] order.
    pub fn parameter_mut(&mut self, mut i: usize) -> Option<&mut f64> {
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let nw = w.as_slice().len();
            if i < nw {
                return Some(&mut w.as_mut_slice()[i]);
            }
            i -= nw;
            if i < b.len() {
                return Some(&mut b[i]);
            }
            i -= b.len();
        }
        None
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for w in &self.weights {
            w.ensure_finite("parameters")?;
        }
        if self.biases.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("parameters".into()));
        }
        Ok(())
    }
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Matrix,
    /// Pre-activation value of every layer; the last entry is the logits.
    pub pre: Vec<Matrix>,
    /// Layer outputs: activated hidden layers, then the logits.
    pub outputs: Vec<Matrix>,
    pub probs: Matrix,
}

impl ForwardTrace {
    /// Feature matrix a tap on layer `l` sees.
    pub fn features(&self, l: usize) -> &Matrix {
        &self.outputs[l]
    }
}

pub fn forward(params: &ModelParams, batch: &Matrix) -> Result<ForwardTrace> {
    params.check_shapes()?;
    if batch.cols() != params.config.input_dim {
        return Err(Error::Shape(format!(
            "batch has {} features, model expects {}",
            batch.cols(),
            params.config.input_dim
        )));
    }
    let last = params.config.layer_count() - 1;
    let act = params.config.activation;
    let mut pre = Vec::with_capacity(last + 1);
    let mut outputs: Vec<Matrix> = Vec::with_capacity(last + 1);
    for l in 0..=last {
        let input = if l == 0 { batch } else { &outputs[l - 1] };
        let z = dense_forward(input, &params.weights[l], &params.biases[l])?;
        let a = if l == last { z.clone() } else { act.forward(&z) };
        pre.push(z);
        outputs.push(a);
    }
    let probs = softmax_rows(&outputs[last])?;
    Ok(ForwardTrace {
        input: batch.clone(),
        pre,
        outputs,
        probs,
    })
}

/// Argmax class per row; ties go to the lowest index.
pub fn argmax_rows(probs: &Matrix) -> Vec<usize> {
    probs
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn predict(params: &ModelParams, x: &Matrix) -> Result<Vec<usize>> {
    Ok(argmax_rows(&forward(params, x)?.probs))
}

/// Everything besides the parameters and data that defines the objective.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub weights: &'a AuxWeights,
    /// One kernel per tap layer, in tap order.
    pub kernels: &'a [KernelSpec],
    pub lambda: f64,
    pub gamma: f64,
}

impl Objective<'_> {
    fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.kernels.len() != config.tap_layers.len() {
            return Err(Error::Parameter(format!(
                "{} kernels for {} tap layers",
                self.kernels.len(),
                config.tap_layers.len()
            )));
        }
        if self.weights.class_count() != config.class_count {
            return Err(Error::Shape(format!(
                "aux weights over {} classes, model has {}",
                self.weights.class_count(),
                config.class_count
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0 && self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Parameter("lambda and gamma must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub source_ce: f64,
    /// Mean pseudo-label cross-entropy (before the γ factor).
    pub target_ce: f64,
    /// Linear-time WMMD² per tap layer (before the λ factor); empty when λ = 0.
    pub wmmd: Vec<f64>,
    pub total: f64,
}

fn mean_ce(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != probs.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            probs.rows()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut total = 0.0;
    for (row, &y) in probs.iter_rows().zip(labels) {
        total += cross_entropy(row, y)?;
    }
    Ok(total / labels.len() as f64)
}

/// Loss from precomputed traces.
pub fn loss_from_traces(
    src: &ForwardTrace,
    src_labels: &[usize],
    tgt: &ForwardTrace,
    tgt_pseudo: &[usize],
    config: &ModelConfig,
    obj: &Objective<'_>,
) -> Result<LossBreakdown> {
    obj.check(config)?;
    let source_ce = mean_ce(&src.probs, src_labels)?;
    if tgt_pseudo.len() != tgt.probs.rows() {
        return Err(Error::Data(format!(
            "{} pseudo-labels for {} target rows",
            tgt_pseudo.len(),
            tgt.probs.rows()
        )));
    }
    let target_ce = if obj.gamma > 0.0 {
        mean_ce(&tgt.probs, tgt_pseudo)?
    } else {
        0.0
    };
    let mut wmmd = Vec::new();
    if obj.lambda > 0.0 {
        for (&l, spec) in config.tap_layers.iter().zip(obj.kernels) {
            wmmd.push(wmmd2_linear(src.features(l), src_labels, tgt.features(l), obj.weights, spec)?);
        }
    }
    let total = source_ce + obj.gamma * target_ce + obj.lambda * wmmd.iter().sum::<f64>();
    if !total.is_finite() {
        return Err(Error::Numeric("loss".into()));
    }
    Ok(LossBreakdown {
        source_ce,
        target_ce,
        wmmd,
        total,
    })
}

pub fn loss(
    params: &ModelParams,
    src_batch: &Matrix,
    src_labels: &[usize],
    tgt_batch: &Matrix,
    tgt_pseudo: &[usize],
    obj: &Objective<'_>,
) -> Result<LossBreakdown> {
    let s = forward(params, src_batch)?;
    let t = forward(params, tgt_batch)?;
    loss_from_traces(&s, src_labels, &t, tgt_pseudo, &params.config, obj)
}

/// ∂(mean CE)/∂logits, scaled.
fn ce_logit_grad(probs: &Matrix, labels: &[usize], scale: f64) -> Result<Matrix> {
    let n = labels.len() as f64;
    let mut g = Matrix::zeros(probs.rows(), probs.cols());
    for (r, &y) in labels.iter().enumerate() {
        let row = softmax_cross_entropy_grad(probs.row(r), y)?;
        for (o, v) in g.row_mut(r).iter_mut().zip(row) {
            *o = scale * v / n;
        }
    }
    Ok(g)
}

/// Backpropagates per-layer output gradients through one domain's trace and
/// accumulates parameter gradients into `grads`.
///
/// `injected[l]` is added to ∂L/∂(output of layer l) before that layer's
/// backward step.
fn backprop(
    params: &ModelParams,
    trace: &ForwardTrace,
    mut injected: Vec<Option<Matrix>>,
    grads: &mut Gradients,
) -> Result<()> {
    let last = params.config.layer_count() - 1;
    let act = params.config.activation;
    let mut upstream: Option<Matrix> = None;
    for l in (0..=last).rev() {
        let mut g_out = match (upstream.take(), injected[l].take()) {
            (Some(mut u), Some(i)) => {
                u.add_assign(&i)?;
                u
            }
            (Some(u), None) => u,
            (None, Some(i)) => i,
            (None, None) => continue,
        };
        if l != last {
            g_out = act.backward(&trace.pre[l], &trace.outputs[l], &g_out)?;
        }
        let input = if l == 0 { &trace.input } else { &trace.outputs[l - 1] };
        let (g_in, g_w, g_b) = dense_backward(input, &params.weights[l], &g_out)?;
        grads.weights[l].add_assign(&g_w)?;
        grads.biases[l].iter_mut().zip(&g_b).for_each(|(a, b)| *a += b);
        if l > 0 {
            upstream = Some(g_in);
        }
    }
    Ok(())
}

/// Gradient of the full objective with respect to every parameter.
pub fn backward(
    params: &ModelParams,
    src: &ForwardTrace,
    src_labels: &[usize],
    tgt: &ForwardTrace,
    tgt_pseudo: &[usize],
    obj: &Objective<'_>,
) -> Result<Gradients> {
    let config = &params.config;
    obj.check(config)?;
    let layers = config.layer_count();
    let last = layers - 1;
    if src_labels.len() != src.probs.rows() || tgt_pseudo.len() != tgt.probs.rows() {
        return Err(Error::Shape("labels do not match traces".into()));
    }

    let mut inj_src: Vec<Option<Matrix>> = vec![None; layers];
    let mut inj_tgt: Vec<Option<Matrix>> = vec![None; layers];
    inj_src[last] = Some(ce_logit_grad(&src.probs, src_labels, 1.0)?);
    if obj.gamma > 0.0 {
        inj_tgt[last] = Some(ce_logit_grad(&tgt.probs, tgt_pseudo, obj.gamma)?);
    }

    if obj.lambda > 0.0 {
        for (&l, spec) in config.tap_layers.iter().zip(obj.kernels) {
            let (_, mut gs, mut gt) =
                wmmd2_linear_with_grad(src.features(l), src_labels, tgt.features(l), obj.weights, spec)?;
            gs.scale(obj.lambda);
            gt.scale(obj.lambda);
            for (slot, g) in [(&mut inj_src[l], gs), (&mut inj_tgt[l], gt)] {
                match slot {
                    Some(existing) => existing.add_assign(&g)?,
                    None => *slot = Some(g),
                }
            }
        }
    }

    let mut grads = params.zero_gradients();
    backprop(params, src, inj_src, &mut grads)?;
    backprop(params, tgt, inj_tgt, &mut grads)?;
    Ok(grads)
}

/// One forward pass per domain, then loss and gradient.
pub fn loss_and_grad(
    params: &ModelParams,
    src_batch: &Matrix,
    src_labels: &[usize],
    tgt_batch: &Matrix,
    tgt_pseudo: &[usize],
    obj: &Objective<'_>,
) -> Result<(LossBreakdown, Gradients)> {
    let s = forward(params, src_batch)?;
    let t = forward(params, tgt_batch)?;
    let l = loss_from_traces(&s, src_labels, &t, tgt_pseudo, &params.config, obj)?;
    let g = backward(params, &s, src_labels, &t, tgt_pseudo, obj)?;
    Ok((l, g))
}

const CHECKPOINT_FORMAT: &str = "wmmd-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    params: ModelParams,
}

/// JSON dump of config, shapes and values. Floats are written in shortest
/// round-trip form, so a reload is bit-identical.
pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        params: params.clone(),
    };
    fs::write(path, serde_json::to_string_pretty(&ck)?)?;
    Ok(())
}

pub fn checkpoint_from_str(s: &str) -> Result<ModelParams> {
    let ck: Checkpoint = serde_json::from_str(s)?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format '{}'", ck.format)));
    }
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
    }
    ck.params.check_shapes()?;
    ck.params.ensure_finite()?;
    Ok(ck.params)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    checkpoint_from_str(&fs::read_to_string(path)?)
}
