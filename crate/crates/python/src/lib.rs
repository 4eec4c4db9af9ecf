//! Python bindings: kernels, the four estimators, class weights, training
//! and the experiment runners. Matrices cross the boundary as lists of rows
//! (any sequence of float sequences, including 2-D numpy arrays).

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use wmmd::cem::{evaluate, train as cem_train, Arm, TrainConfig};
use wmmd::data::{make_bias_pair, Dataset, Domain};
use wmmd::experiment::{
    bias_priors, run_bias_sweep, run_estimator_check, run_gradient_check, run_lambda_sweep, summarize,
    ExperimentKind, RunConfig,
};
use wmmd::kernels::{self, KernelSpec};
use wmmd::mmd::{self, AuxWeights};
use wmmd::model::{self, ModelConfig, ModelParams};
use wmmd::numerics::{Activation, Matrix};

fn err(e: wmmd::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

fn parse_arm(s: &str) -> PyResult<Arm> {
    Arm::ALL
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| PyValueError::new_err(format!("unknown arm {s:?}; expected src-only, dan or wdan")))
}

#[pyclass(name = "KernelSpec", module = "wmmd", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyKernelSpec {
    inner: KernelSpec,
}

#[pymethods]
impl PyKernelSpec {
    #[new]
    fn new(bandwidths: Vec<f64>, betas: Vec<f64>) -> PyResult<Self> {
        KernelSpec::new(bandwidths, betas).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn single(sigma: f64) -> PyResult<Self> {
        KernelSpec::single(sigma).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (base, multipliers = kernels::DEFAULT_MULTIPLIERS.to_vec()))]
    fn multi_scale(base: f64, multipliers: Vec<f64>) -> PyResult<Self> {
        KernelSpec::multi_scale(base, &multipliers).map(|inner| Self { inner }).map_err(err)
    }

    /// Median-heuristic bandwidth times the default multipliers.
    #[staticmethod]
    fn from_data(data: Vec<Vec<f64>>) -> PyResult<Self> {
        KernelSpec::from_data(&matrix(data)?).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn bandwidths(&self) -> Vec<f64> {
        self.inner.bandwidths().to_vec()
    }

    #[getter]
    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    fn __call__(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
        kernels::multi_kernel(&x, &y, &self.inner).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("KernelSpec(bandwidths={:?}, betas={:?})", self.inner.bandwidths(), self.inner.betas())
    }
}

#[pyclass(name = "AuxWeights", module = "wmmd", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyAuxWeights {
    inner: AuxWeights,
}

#[pymethods]
impl PyAuxWeights {
    #[new]
    fn new(source_priors: Vec<f64>, target_priors: Vec<f64>, alphas: Vec<f64>) -> PyResult<Self> {
        AuxWeights::new(source_priors, target_priors, alphas)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    #[staticmethod]
    fn ones(source_priors: Vec<f64>) -> PyResult<Self> {
        AuxWeights::ones(source_priors).map(|inner| Self { inner }).map_err(err)
    }

    /// `α_c = (w^t_c + ε) / (w^s_c + ε)`.
    #[staticmethod]
    #[pyo3(signature = (source_priors, target_priors, smoothing = 0.0))]
    fn from_priors(source_priors: Vec<f64>, target_priors: Vec<f64>, smoothing: f64) -> PyResult<Self> {
        AuxWeights::from_priors(source_priors, target_priors, smoothing)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    #[getter]
    fn alphas(&self) -> Vec<f64> {
        self.inner.alphas().to_vec()
    }

    #[getter]
    fn source_priors(&self) -> Vec<f64> {
        self.inner.source_priors().to_vec()
    }

    #[getter]
    fn target_priors(&self) -> Vec<f64> {
        self.inner.target_priors().to_vec()
    }

    fn normalized_alphas(&self) -> Vec<f64> {
        self.inner.normalized_alphas()
    }

    fn __repr__(&self) -> String {
        format!("AuxWeights(alphas={:?})", self.inner.alphas())
    }
}

#[pyfunction]
fn median_heuristic(data: Vec<Vec<f64>>) -> PyResult<f64> {
    kernels::median_heuristic(&matrix(data)?).map_err(err)
}

#[pyfunction]
fn mmd2_quadratic(source: Vec<Vec<f64>>, target: Vec<Vec<f64>>, kernel: &PyKernelSpec) -> PyResult<f64> {
    mmd::mmd2_quadratic(&matrix(source)?, &matrix(target)?, &kernel.inner).map_err(err)
}

#[pyfunction]
fn mmd2_unbiased(source: Vec<Vec<f64>>, target: Vec<Vec<f64>>, kernel: &PyKernelSpec) -> PyResult<f64> {
    mmd::mmd2_unbiased(&matrix(source)?, &matrix(target)?, &kernel.inner).map_err(err)
}

#[pyfunction]
fn mmd2_linear(source: Vec<Vec<f64>>, target: Vec<Vec<f64>>, kernel: &PyKernelSpec) -> PyResult<f64> {
    mmd::mmd2_linear(&matrix(source)?, &matrix(target)?, &kernel.inner).map_err(err)
}

#[pyfunction]
fn wmmd2_quadratic(
    source: Vec<Vec<f64>>,
    source_labels: Vec<usize>,
    target: Vec<Vec<f64>>,
    weights: &PyAuxWeights,
    kernel: &PyKernelSpec,
) -> PyResult<f64> {
    mmd::wmmd2_quadratic(&matrix(source)?, &source_labels, &matrix(target)?, &weights.inner, &kernel.inner)
        .map_err(err)
}

#[pyfunction]
fn wmmd2_linear(
    source: Vec<Vec<f64>>,
    source_labels: Vec<usize>,
    target: Vec<Vec<f64>>,
    weights: &PyAuxWeights,
    kernel: &PyKernelSpec,
) -> PyResult<f64> {
    mmd::wmmd2_linear(&matrix(source)?, &source_labels, &matrix(target)?, &weights.inner, &kernel.inner)
        .map_err(err)
}

/// A trained classifier with its training trace.
#[pyclass(name = "Model", module = "wmmd", frozen)]
struct PyModel {
    params: ModelParams,
    loss_history: Vec<f64>,
    alphas: Vec<f64>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let params = model::load_checkpoint(path).map_err(err)?;
        Ok(Self {
            params,
            loss_history: Vec::new(),
            alphas: Vec::new(),
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        model::save_checkpoint(&self.params, path).map_err(err)
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        model::predict(&self.params, &matrix(x)?).map_err(err)
    }

    fn predict_proba(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let trace = model::forward(&self.params, &matrix(x)?).map_err(err)?;
        Ok(rows(&trace.probs))
    }

    fn accuracy(&self, x: Vec<Vec<f64>>, y: Vec<usize>) -> PyResult<f64> {
        let data = Dataset::new(matrix(x)?, Some(y), Domain::Target).map_err(err)?;
        evaluate(&self.params, &data).map(|e| e.accuracy).map_err(err)
    }

    #[getter]
    fn loss_history(&self) -> Vec<f64> {
        self.loss_history.clone()
    }

    /// Final class weights, normalized so that `Σ w^s_c α_c = 1`.
    #[getter]
    fn alphas(&self) -> Vec<f64> {
        self.alphas.clone()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }
}

/// Trains one arm on labeled source rows and unlabeled target rows.
#[pyfunction]
#[pyo3(signature = (
    source_x, source_y, target_x, arm = "wdan", lambda_ = 0.4, gamma = 0.0, epochs = 30, batch_size = 64,
    learning_rate = 0.01, momentum = 0.9, seed = 0, hidden_dims = vec![64, 32], tap_layers = vec![1, 2],
    activation = "relu"
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    source_x: Vec<Vec<f64>>,
    source_y: Vec<usize>,
    target_x: Vec<Vec<f64>>,
    arm: &str,
    lambda_: f64,
    gamma: f64,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    momentum: f64,
    seed: u64,
    hidden_dims: Vec<usize>,
    tap_layers: Vec<usize>,
    activation: &str,
) -> PyResult<PyModel> {
    let arm = parse_arm(arm)?;
    let activation = match activation {
        "relu" => Activation::Relu,
        "tanh" => Activation::Tanh,
        other => return Err(PyValueError::new_err(format!("unknown activation {other:?}"))),
    };
    let src = Dataset::new(matrix(source_x)?, Some(source_y), Domain::Source).map_err(err)?;
    let tgt = matrix(target_x)?;
    let class_count = src.labels().map_err(err)?.iter().max().map_or(1, |m| m + 1);
    let model = ModelConfig {
        input_dim: src.dim(),
        hidden_dims,
        class_count,
        tap_layers,
        activation,
    };
    let config = arm.configure(&TrainConfig {
        lambda: lambda_,
        gamma,
        epochs,
        batch_size,
        learning_rate,
        momentum,
        seed,
        ..TrainConfig::default()
    });
    let state = py
        .detach(|| cem_train(&src, &tgt, &model, &config, &Default::default()))
        .map_err(err)?;
    Ok(PyModel {
        alphas: state.weights.normalized_alphas(),
        loss_history: state.loss_history,
        params: state.params,
    })
}

/// Source and target draws of the default synthetic task with majority
/// target weight `bias`: `(source_x, source_y, target_x, target_y)`.
#[pyfunction]
#[pyo3(signature = (bias = 0.8, source_size = 1000, target_size = 1000, seed = 0))]
#[allow(clippy::type_complexity)]
fn synthetic_pair(
    bias: f64,
    source_size: usize,
    target_size: usize,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>, Vec<usize>)> {
    let spec = RunConfig::default().mixture;
    let pair = make_bias_pair(&spec, &bias_priors(bias, spec.class_count), source_size, target_size, seed)
        .map_err(err)?;
    let eval = pair.target.evaluation_set();
    Ok((
        rows(&pair.source.features),
        pair.source.labels().map_err(err)?.to_vec(),
        rows(&eval.features),
        eval.labels().map_err(err)?.to_vec(),
    ))
}

/// Runs `bias-sweep`, `lambda-sweep`, `estimator-check` or `gradient-check`
/// with an optional JSON config and returns the results as JSON. Nothing is
/// written to disk.
#[pyfunction]
#[pyo3(signature = (kind, config = None))]
fn run_experiment(py: Python<'_>, kind: &str, config: Option<&str>) -> PyResult<String> {
    let mut cfg = match config {
        Some(s) => RunConfig::from_json(s).map_err(err)?,
        None => RunConfig::default(),
    };
    cfg.kind = match kind {
        "bias-sweep" => ExperimentKind::BiasSweep,
        "lambda-sweep" => ExperimentKind::LambdaSweep,
        "estimator-check" => ExperimentKind::EstimatorCheck,
        "gradient-check" => ExperimentKind::GradientCheck,
        other => return Err(PyValueError::new_err(format!("unknown experiment {other:?}"))),
    };
    let out = py.detach(|| -> wmmd::Result<serde_json::Value> {
        Ok(match cfg.kind {
            ExperimentKind::BiasSweep | ExperimentKind::LambdaSweep => {
                let rows = if cfg.kind == ExperimentKind::BiasSweep {
                    run_bias_sweep(&cfg)?
                } else {
                    run_lambda_sweep(&cfg)?
                };
                serde_json::json!({ "groups": summarize(&rows), "rows": rows })
            }
            ExperimentKind::EstimatorCheck => serde_json::to_value(run_estimator_check(&cfg)?)?,
            _ => serde_json::to_value(run_gradient_check(&cfg)?)?,
        })
    });
    Ok(out.map_err(err)?.to_string())
}

#[pymodule]
#[pyo3(name = "wmmd")]
fn wmmd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKernelSpec>()?;
    m.add_class::<PyAuxWeights>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(median_heuristic, m)?)?;
    m.add_function(wrap_pyfunction!(mmd2_quadratic, m)?)?;
    m.add_function(wrap_pyfunction!(mmd2_unbiased, m)?)?;
    m.add_function(wrap_pyfunction!(mmd2_linear, m)?)?;
    m.add_function(wrap_pyfunction!(wmmd2_quadratic, m)?)?;
    m.add_function(wrap_pyfunction!(wmmd2_linear, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_pair, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("LAMBDA_GRID", wmmd::cem::LAMBDA_GRID.to_vec())?;
    Ok(())
}
