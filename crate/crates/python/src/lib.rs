//! Python bindings: `import pycompconv`.
//!
//! Tensors cross the boundary as flat `list[float]` plus an `(n, c, h, w)` tuple;
//! reports come back as plain dicts.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use compconv::cost::{compconv_cost, conv_cost, network_cost};
use compconv::data::synth_stripes;
use compconv::layer::{CompConvLayer, ConvModule, InitConfig};
use compconv::network::Network;
use compconv::planner::{self, CompPlan, DepthPolicy};
use compconv::train::{train, TrainConfig};
use compconv::verify::{run_suites, Suite};
use compconv::zoo::{builtin, compress, toy_cnn, BUILTIN_NAMES, TOY_COMP_POLICY};
use compconv::{ConvSpec, MacCounter, Tensor};

type Shape4 = (usize, usize, usize, usize);

fn py_err(e: compconv::Error) -> PyErr {
    match e {
        compconv::Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

/// `depth=0` is the plain convolution; giving neither keeps it too.
pub fn policy(depth: Option<usize>, c0: Option<usize>) -> Result<DepthPolicy, String> {
    match (depth, c0) {
        (Some(_), Some(_)) => Err("pass either depth or c0, not both".into()),
        (Some(0), None) | (None, None) => Ok(DepthPolicy::Vanilla),
        (Some(d), None) => Ok(DepthPolicy::Global { d }),
        (None, Some(c0)) => Ok(DepthPolicy::Adaptive { c0 }),
    }
}

fn py_policy(depth: Option<usize>, c0: Option<usize>) -> PyResult<DepthPolicy> {
    policy(depth, c0).map_err(PyValueError::new_err)
}

fn tensor(data: Vec<f64>, shape: Shape4) -> PyResult<Tensor> {
    let (n, c, h, w) = shape;
    Tensor::from_vec([n, c, h, w], data).map_err(py_err)
}

fn untensor(t: Tensor) -> (Vec<f64>, Shape4) {
    let [n, c, h, w] = t.shape().dims();
    (t.into_data(), (n, c, h, w))
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Resolved CompConv layout for one layer.
#[pyclass(name = "Plan", module = "pycompconv", frozen, eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
pub struct PyPlan {
    pub inner: CompPlan,
}

#[pymethods]
impl PyPlan {
    #[new]
    #[pyo3(signature = (c_in, c_out, depth=None, c0=None))]
    fn new(c_in: usize, c_out: usize, depth: Option<usize>, c0: Option<usize>) -> PyResult<Self> {
        let p = py_policy(depth, c0)?;
        if p.is_vanilla() {
            return Err(PyValueError::new_err("a plan needs depth >= 1 or c0"));
        }
        planner::build_plan(c_in, c_out, p)
            .map(|inner| PyPlan { inner })
            .map_err(py_err)
    }

    #[staticmethod]
    fn from_record(text: &str) -> PyResult<Self> {
        CompPlan::from_record(text)
            .map(|inner| PyPlan { inner })
            .map_err(py_err)
    }

    fn to_record(&self) -> String {
        self.inner.to_record()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth
    }

    #[getter]
    fn c_in(&self) -> usize {
        self.inner.c_in
    }

    #[getter]
    fn c_out(&self) -> usize {
        self.inner.c_out
    }

    #[getter]
    fn c_prim(&self) -> usize {
        self.inner.c_prim
    }

    #[getter]
    fn block_sizes(&self) -> Vec<usize> {
        self.inner.block_sizes.clone()
    }

    #[getter]
    fn drop(&self) -> usize {
        self.inner.drop
    }

    #[getter]
    fn tail_channels(&self) -> usize {
        self.inner.tail_channels
    }

    #[getter]
    fn shuffle_groups(&self) -> usize {
        self.inner.shuffle_groups
    }

    /// `[(kind, kept channels, raw channels), ...]` in output order.
    #[getter]
    fn segments(&self) -> Vec<(String, usize, usize)> {
        self.inner
            .segments
            .iter()
            .map(|s| (s.kind.to_string(), s.channels, s.raw))
            .collect()
    }

    /// Invariant violations; empty for a valid plan.
    fn violations(&self) -> Vec<String> {
        planner::validate_plan(&self.inner)
            .iter()
            .map(ToString::to_string)
            .collect()
    }

    /// `(params, macs)` when replacing a `k x k` conv on an `h x w` input.
    #[pyo3(signature = (k=3, stride=1, h=32, w=32))]
    fn cost(&self, k: usize, stride: usize, h: usize, w: usize) -> PyResult<(u64, u64)> {
        let host = ConvSpec::same(self.inner.c_in, self.inner.c_out, k).with_stride(stride);
        let c = compconv_cost(&self.inner, &host, h, w).map_err(py_err)?;
        Ok((c.params, c.macs))
    }

    fn __repr__(&self) -> String {
        let p = &self.inner;
        format!(
            "Plan(c_in={}, c_out={}, depth={}, c_prim={}, drop={})",
            p.c_in, p.c_out, p.depth, p.c_prim, p.drop
        )
    }
}

/// A convolution that is either plain (`depth=0`) or a CompConv replacement.
#[pyclass(name = "Layer", module = "pycompconv", frozen)]
pub struct PyLayer {
    inner: ConvModule,
}

#[pymethods]
impl PyLayer {
    #[new]
    #[pyo3(signature = (c_in, c_out, k=3, stride=1, depth=None, c0=None, seed=0))]
    fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        depth: Option<usize>,
        c0: Option<usize>,
        seed: u64,
    ) -> PyResult<Self> {
        let host = ConvSpec::same(c_in, c_out, k).with_stride(stride);
        let inner = ConvModule::build(host, py_policy(depth, c0)?, &InitConfig::he_normal(seed)).map_err(py_err)?;
        Ok(PyLayer { inner })
    }

    /// Restore a CompConv layer from [`PyLayer::to_bytes`] output.
    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        let layer = CompConvLayer::import_weights(data).map_err(py_err)?;
        Ok(PyLayer {
            inner: ConvModule::Comp(layer),
        })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        match &self.inner {
            ConvModule::Comp(l) => Ok(PyBytes::new(py, &l.export_weights())),
            ConvModule::Vanilla { .. } => Err(PyValueError::new_err("only CompConv layers serialize")),
        }
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }

    #[getter]
    fn param_count(&self) -> u64 {
        self.inner.param_count()
    }

    #[getter]
    fn plan(&self) -> Option<PyPlan> {
        match &self.inner {
            ConvModule::Comp(l) => Some(PyPlan { inner: l.plan.clone() }),
            ConvModule::Vanilla { .. } => None,
        }
    }

    /// Returns `(data, shape, macs)`.
    fn forward(&self, data: Vec<f64>, shape: Shape4) -> PyResult<(Vec<f64>, Shape4, u64)> {
        let x = tensor(data, shape)?;
        let mut counter = MacCounter::new();
        let y = self.inner.forward(&x, Some(&mut counter)).map_err(py_err)?;
        let (d, s) = untensor(y);
        Ok((d, s, counter.macs()))
    }

    /// The loop-based oracle forward pass (CompConv layers only).
    fn reference_forward(&self, data: Vec<f64>, shape: Shape4) -> PyResult<(Vec<f64>, Shape4)> {
        let x = tensor(data, shape)?;
        match &self.inner {
            ConvModule::Comp(l) => Ok(untensor(compconv::reference::compconv_forward(l, &x))),
            ConvModule::Vanilla { spec, weights } => Ok(untensor(compconv::reference::conv2d(&x, weights, spec))),
        }
    }
}

#[pyfunction]
fn choose_depth(c_in: usize, c0: usize) -> usize {
    planner::choose_depth(c_in, c0)
}

#[pyfunction]
fn compute_cprim(c_out: usize, depth: usize) -> PyResult<usize> {
    planner::compute_cprim(c_out, depth).map_err(py_err)
}

/// `(params, macs)` of a plain convolution.
#[pyfunction]
#[pyo3(signature = (c_in, c_out, k=3, stride=1, h=32, w=32))]
fn conv_cost_of(c_in: usize, c_out: usize, k: usize, stride: usize, h: usize, w: usize) -> PyResult<(u64, u64)> {
    let c = conv_cost(&ConvSpec::same(c_in, c_out, k).with_stride(stride), h, w).map_err(py_err)?;
    Ok((c.params, c.macs))
}

#[pyfunction]
fn builtin_archs() -> Vec<&'static str> {
    BUILTIN_NAMES.to_vec()
}

/// Cost report of a built-in architecture as a dict.
#[pyfunction]
#[pyo3(signature = (arch, depth=None, c0=None, input_res=None))]
fn analyze<'py>(
    py: Python<'py>,
    arch: &str,
    depth: Option<usize>,
    c0: Option<usize>,
    input_res: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut spec = builtin(arch).ok_or_else(|| PyValueError::new_err(format!("unknown architecture {arch:?}")))?;
    if let Some(r) = input_res {
        spec.input_shape.h = r;
        spec.input_shape.w = r;
    }
    let report = network_cost(&spec, py_policy(depth, c0)?).map_err(py_err)?;
    json_to_py(py, &report.to_json())
}

/// Run oracle suites; returns a list of per-suite dicts.
#[pyfunction]
#[pyo3(signature = (suite="all", seed=0))]
fn verify<'py>(py: Python<'py>, suite: &str, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let suites = Suite::parse(suite).ok_or_else(|| PyValueError::new_err(format!("unknown suite {suite:?}")))?;
    let reports = py.detach(|| run_suites(&suites, seed)).map_err(py_err)?;
    let text = serde_json::to_string(&reports).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &text)
}

/// Train a toy classifier on synthetic stripes; returns the per-epoch records.
#[pyfunction]
#[pyo3(signature = (arch="toy-comp", epochs=20, lr=0.05, seed=0, samples=128, size=8, noise=0.2))]
#[allow(clippy::too_many_arguments)]
fn train_stripes<'py>(
    py: Python<'py>,
    arch: &str,
    epochs: usize,
    lr: f64,
    seed: u64,
    samples: usize,
    size: usize,
    noise: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let base = toy_cnn(1, size, 2);
    let spec = match arch {
        "toy-comp" => compress(&base, TOY_COMP_POLICY).map_err(py_err)?,
        "toy-vanilla" => base,
        _ => {
            return Err(PyValueError::new_err(format!(
                "arch must be toy-comp or toy-vanilla, got {arch:?}"
            )))
        }
    };
    let cfg = TrainConfig {
        learning_rate: lr,
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let history = py
        .detach(|| {
            let data = synth_stripes(samples, size, noise, seed)?;
            let mut net = Network::init(spec, seed)?;
            train(&mut net, &data, &cfg, None)
        })
        .map_err(py_err)?;
    let text = serde_json::to_string(&history.records).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &text)
}

#[pymodule]
fn pycompconv(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPlan>()?;
    m.add_class::<PyLayer>()?;
    m.add_function(wrap_pyfunction!(choose_depth, m)?)?;
    m.add_function(wrap_pyfunction!(compute_cprim, m)?)?;
    m.add_function(wrap_pyfunction!(conv_cost_of, m)?)?;
    m.add_function(wrap_pyfunction!(builtin_archs, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(train_stripes, m)?)?;
    Ok(())
}
