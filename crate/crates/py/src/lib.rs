//! Python bindings for the non-local attention block library.
//!
//! Thin wrappers: tensors cross the boundary as flat f64 lists plus a
//! shape, enums as their snake_case names, reports as dicts.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use scaled_nl_core::{
    analysis, attention, autodiff, cost, toy, AblationScope, AttentionConfig, BlockVariant,
    ComputeMode, InitScheme, Rng,
};

fn to_py_err(e: scaled_nl_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_variant(s: &str) -> PyResult<BlockVariant> {
    match s {
        "softmax_nl" => Ok(BlockVariant::Softmax),
        "scaled_nl" => Ok(BlockVariant::Scaled),
        other => Err(PyValueError::new_err(format!(
            "unknown variant {other:?}; use softmax_nl or scaled_nl"
        ))),
    }
}

fn parse_mode(s: &str) -> PyResult<ComputeMode> {
    match s {
        "materialized" => Ok(ComputeMode::Materialized),
        "associative" => Ok(ComputeMode::Associative),
        other => Err(PyValueError::new_err(format!(
            "unknown mode {other:?}; use materialized or associative"
        ))),
    }
}

fn parse_scope(s: &str) -> PyResult<AblationScope> {
    match s {
        "full" => Ok(AblationScope::Full),
        "magnitude_only" => Ok(AblationScope::MagnitudeOnly),
        "direction_only" => Ok(AblationScope::DirectionOnly),
        other => Err(PyValueError::new_err(format!(
            "unknown scope {other:?}; use full, magnitude_only, or direction_only"
        ))),
    }
}

fn parse_init(s: &str) -> PyResult<InitScheme> {
    match s {
        "he" => Ok(InitScheme::He),
        "gaussian_0p01" => Ok(InitScheme::Gaussian0p01),
        "zeros" => Ok(InitScheme::Zeros),
        other => Err(PyValueError::new_err(format!(
            "unknown init {other:?}; use he, gaussian_0p01, or zeros"
        ))),
    }
}

/// Dense row-major tensor of float64.
#[pyclass(name = "Tensor", from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: scaled_nl_core::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: scaled_nl_core::Tensor::new(shape, data).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn standard_normal(shape: Vec<usize>, seed: u64) -> PyResult<Self> {
        let mut rng = Rng::new(seed);
        Ok(PyTensor {
            inner: scaled_nl_core::Tensor::standard_normal(shape, &mut rng).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn matmul(&self, rhs: &PyTensor) -> PyResult<Self> {
        Ok(PyTensor {
            inner: self.inner.matmul(&rhs.inner).map_err(to_py_err)?,
        })
    }

    fn softmax_rows(&self) -> PyResult<Self> {
        Ok(PyTensor {
            inner: self.inner.softmax_rows().map_err(to_py_err)?,
        })
    }

    fn transpose(&self) -> PyResult<Self> {
        Ok(PyTensor {
            inner: self.inner.transpose().map_err(to_py_err)?,
        })
    }

    fn row_norms(&self) -> PyResult<Self> {
        Ok(PyTensor {
            inner: self.inner.row_norms().map_err(to_py_err)?,
        })
    }

    fn add(&self, rhs: &PyTensor) -> PyResult<Self> {
        Ok(PyTensor {
            inner: self.inner.add(&rhs.inner).map_err(to_py_err)?,
        })
    }

    fn scale(&self, factor: f64) -> Self {
        PyTensor {
            inner: self.inner.scale(factor),
        }
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    fn variance(&self) -> f64 {
        self.inner.variance()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Spatially flattened feature map.
#[pyclass(name = "FeatureMap", from_py_object)]
#[derive(Clone)]
struct PyFeatureMap {
    inner: attention::FeatureMap,
}

#[pymethods]
impl PyFeatureMap {
    #[new]
    fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> PyResult<Self> {
        let values = scaled_nl_core::Tensor::new(vec![height * width, channels], data)
            .map_err(to_py_err)?;
        Ok(PyFeatureMap {
            inner: attention::FeatureMap::new(height, width, channels, values)
                .map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn random(height: usize, width: usize, channels: usize, seed: u64) -> PyResult<Self> {
        let mut rng = Rng::new(seed);
        Ok(PyFeatureMap {
            inner: attention::FeatureMap::random(height, width, channels, &mut rng)
                .map_err(to_py_err)?,
        })
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    fn values(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.values().clone(),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "FeatureMap({}x{}x{})",
            self.inner.height(),
            self.inner.width(),
            self.inner.channels()
        )
    }
}

/// Block configuration.
#[pyclass(name = "AttentionConfig", from_py_object)]
#[derive(Clone)]
struct PyAttentionConfig {
    inner: AttentionConfig,
}

#[pymethods]
impl PyAttentionConfig {
    #[new]
    #[pyo3(signature = (variant, channels, embed_channels, heads=1, scope="full", init="he", residual=true))]
    fn new(
        variant: &str,
        channels: usize,
        embed_channels: usize,
        heads: usize,
        scope: &str,
        init: &str,
        residual: bool,
    ) -> PyResult<Self> {
        let mut cfg = AttentionConfig::new(parse_variant(variant)?, channels, embed_channels)
            .with_scope(parse_scope(scope)?)
            .with_init(parse_init(init)?)
            .with_residual(residual);
        cfg.heads = heads;
        cfg.validate().map_err(to_py_err)?;
        Ok(PyAttentionConfig { inner: cfg })
    }

    fn __repr__(&self) -> String {
        format!(
            "AttentionConfig(variant={}, c={}, c_e={}, heads={}, scope={}, init={}, residual={})",
            self.inner.variant.name(),
            self.inner.channels,
            self.inner.embed_channels,
            self.inner.heads,
            self.inner.scope.name(),
            self.inner.init.name(),
            self.inner.residual
        )
    }
}

/// Query/key/value/output weights for one head.
#[pyclass(name = "EmbeddingSet", from_py_object)]
#[derive(Clone)]
struct PyEmbeddingSet {
    inner: attention::EmbeddingSet,
}

#[pymethods]
impl PyEmbeddingSet {
    #[getter]
    fn w_query(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.w_query.clone(),
        }
    }

    #[getter]
    fn w_key(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.w_key.clone(),
        }
    }

    #[getter]
    fn w_value(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.w_value.clone(),
        }
    }

    #[getter]
    fn w_out(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.w_out.clone(),
        }
    }
}

#[pyfunction]
fn init_embeddings(cfg: &PyAttentionConfig, seed: u64) -> PyResult<PyEmbeddingSet> {
    let mut rng = Rng::new(seed);
    Ok(PyEmbeddingSet {
        inner: attention::init_embeddings(&cfg.inner, &mut rng).map_err(to_py_err)?,
    })
}

#[pyfunction]
fn init_heads(cfg: &PyAttentionConfig, seed: u64) -> PyResult<Vec<PyEmbeddingSet>> {
    let mut rng = Rng::new(seed);
    Ok(attention::init_heads(&cfg.inner, &mut rng)
        .map_err(to_py_err)?
        .into_iter()
        .map(|inner| PyEmbeddingSet { inner })
        .collect())
}

#[pyfunction]
fn softmax_nl_forward(
    x: &PyFeatureMap,
    emb: &PyEmbeddingSet,
    cfg: &PyAttentionConfig,
) -> PyResult<(PyFeatureMap, PyTensor)> {
    let (y, map) =
        attention::softmax_nl_forward(&x.inner, &emb.inner, &cfg.inner).map_err(to_py_err)?;
    Ok((
        PyFeatureMap { inner: y },
        PyTensor {
            inner: map.values().clone(),
        },
    ))
}

#[pyfunction]
#[pyo3(signature = (x, emb, cfg, mode="associative"))]
fn scaled_nl_forward(
    x: &PyFeatureMap,
    emb: &PyEmbeddingSet,
    cfg: &PyAttentionConfig,
    mode: &str,
) -> PyResult<PyFeatureMap> {
    Ok(PyFeatureMap {
        inner: attention::scaled_nl_forward(&x.inner, &emb.inner, &cfg.inner, parse_mode(mode)?)
            .map_err(to_py_err)?,
    })
}

#[pyfunction]
fn ablated_forward(
    x: &PyFeatureMap,
    emb: &PyEmbeddingSet,
    cfg: &PyAttentionConfig,
) -> PyResult<PyFeatureMap> {
    Ok(PyFeatureMap {
        inner: attention::ablated_forward(&x.inner, &emb.inner, &cfg.inner).map_err(to_py_err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (x, heads, cfg, mode="associative"))]
fn multi_head_forward(
    x: &PyFeatureMap,
    heads: Vec<PyEmbeddingSet>,
    cfg: &PyAttentionConfig,
    mode: &str,
) -> PyResult<PyFeatureMap> {
    let inner_heads: Vec<attention::EmbeddingSet> =
        heads.into_iter().map(|h| h.inner).collect();
    Ok(PyFeatureMap {
        inner: attention::multi_head_forward(&x.inner, &inner_heads, &cfg.inner, parse_mode(mode)?)
            .map_err(to_py_err)?,
    })
}

#[pyfunction]
fn project_magnitude(e: &PyTensor) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: attention::project_magnitude(&e.inner).map_err(to_py_err)?,
    })
}

#[pyfunction]
fn project_direction(e: &PyTensor) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: attention::project_direction(&e.inner).map_err(to_py_err)?,
    })
}

#[pyfunction]
fn extract_map(
    x: &PyFeatureMap,
    emb: &PyEmbeddingSet,
    cfg: &PyAttentionConfig,
) -> PyResult<PyTensor> {
    let map = analysis::extract_map(&x.inner, &emb.inner, &cfg.inner).map_err(to_py_err)?;
    Ok(PyTensor {
        inner: map.values().clone(),
    })
}

#[pyfunction]
fn key_dominance<'py>(
    py: Python<'py>,
    map: &PyTensor,
    normalized: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let map = attention::AttentionMap::new(map.inner.clone(), normalized).map_err(to_py_err)?;
    let report = analysis::key_dominance(&map).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("key_dominance", report.key_dominance)?;
    out.set_item(
        "per_key_query_variance",
        report.per_key_query_variance.data().to_vec(),
    )?;
    out.set_item("map_source", report.map_source.name())?;
    Ok(out)
}

#[pyfunction]
fn variance_stability(
    pixels: usize,
    embed_channels: usize,
    trials: usize,
    seed: u64,
) -> PyResult<f64> {
    let mut rng = Rng::new(seed);
    analysis::variance_stability(pixels, embed_channels, trials, &mut rng).map_err(to_py_err)
}

#[pyfunction]
fn variance_stability_unscaled(
    pixels: usize,
    embed_channels: usize,
    trials: usize,
    seed: u64,
) -> PyResult<f64> {
    let mut rng = Rng::new(seed);
    analysis::variance_stability_unscaled(pixels, embed_channels, trials, &mut rng)
        .map_err(to_py_err)
}

fn cost_dict<'py>(py: Python<'py>, r: cost::CostReport) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("flops", r.flops)?;
    out.set_item("peak_activation_elements", r.peak_activation_elements)?;
    let stages = PyDict::new(py);
    stages.set_item("embed", r.breakdown.embed)?;
    stages.set_item("logits", r.breakdown.logits)?;
    stages.set_item("normalize", r.breakdown.normalize)?;
    stages.set_item("aggregate", r.breakdown.aggregate)?;
    stages.set_item("project", r.breakdown.project)?;
    out.set_item("breakdown", stages)?;
    Ok(out)
}

#[pyfunction]
fn cost_softmax_nl(
    py: Python<'_>,
    h: usize,
    w: usize,
    c: usize,
    c_e: usize,
    n_h: usize,
) -> PyResult<Bound<'_, PyDict>> {
    cost_dict(py, cost::cost_softmax_nl(h, w, c, c_e, n_h).map_err(to_py_err)?)
}

#[pyfunction]
#[pyo3(signature = (h, w, c, c_e, n_h, mode="associative"))]
fn cost_scaled_nl<'py>(
    py: Python<'py>,
    h: usize,
    w: usize,
    c: usize,
    c_e: usize,
    n_h: usize,
    mode: &str,
) -> PyResult<Bound<'py, PyDict>> {
    cost_dict(
        py,
        cost::cost_scaled_nl(h, w, c, c_e, n_h, parse_mode(mode)?).map_err(to_py_err)?,
    )
}

#[pyfunction]
fn crossover(c_e: usize) -> usize {
    cost::crossover(c_e)
}

#[pyfunction]
#[pyo3(signature = (cfg, height, width, seed=0, mode="associative"))]
fn grad_check<'py>(
    py: Python<'py>,
    cfg: &PyAttentionConfig,
    height: usize,
    width: usize,
    seed: u64,
    mode: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let report = autodiff::grad_check(&cfg.inner, height, width, seed, parse_mode(mode)?)
        .map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("max_rel_error", report.max_rel_error)?;
    out.set_item("step", report.step)?;
    out.set_item("passed", report.passed())?;
    out.set_item("entries", report.entries)?;
    Ok(out)
}

#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (variant, height=8, width=8, channels=8, samples=64, steps=2000, seed=0))]
fn train_toy<'py>(
    py: Python<'py>,
    variant: &str,
    height: usize,
    width: usize,
    channels: usize,
    samples: usize,
    steps: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let task =
        toy::generate_task(height, width, channels, samples, seed).map_err(to_py_err)?;
    let cfg = toy::TrainConfig::new(parse_variant(variant)?, steps, seed);
    let outcome = toy::train_toy(&task, &cfg).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("initial_loss", outcome.initial_loss)?;
    out.set_item("final_loss", outcome.final_loss)?;
    out.set_item("final_accuracy", outcome.final_accuracy)?;
    out.set_item("diverged", outcome.diverged)?;
    Ok(out)
}

#[pymodule]
fn scaled_nl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyFeatureMap>()?;
    m.add_class::<PyAttentionConfig>()?;
    m.add_class::<PyEmbeddingSet>()?;
    m.add_function(wrap_pyfunction!(init_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(init_heads, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_nl_forward, m)?)?;
    m.add_function(wrap_pyfunction!(scaled_nl_forward, m)?)?;
    m.add_function(wrap_pyfunction!(ablated_forward, m)?)?;
    m.add_function(wrap_pyfunction!(multi_head_forward, m)?)?;
    m.add_function(wrap_pyfunction!(project_magnitude, m)?)?;
    m.add_function(wrap_pyfunction!(project_direction, m)?)?;
    m.add_function(wrap_pyfunction!(extract_map, m)?)?;
    m.add_function(wrap_pyfunction!(key_dominance, m)?)?;
    m.add_function(wrap_pyfunction!(variance_stability, m)?)?;
    m.add_function(wrap_pyfunction!(variance_stability_unscaled, m)?)?;
    m.add_function(wrap_pyfunction!(cost_softmax_nl, m)?)?;
    m.add_function(wrap_pyfunction!(cost_scaled_nl, m)?)?;
    m.add_function(wrap_pyfunction!(crossover, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    Ok(())
}
