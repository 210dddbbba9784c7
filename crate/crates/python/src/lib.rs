//! Python bindings: models, head identification, cache policies, sessions and
//! the ALiBi scope calculator.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use razorkv_core::bench::{run_bench, write_csv, BenchConfig, PolicyKind, TaskKind, TaskSpec};
use razorkv_core::identify::{self as ident, ProbeSpec, RetrievalHeadSet};
use razorkv_core::kvcache::CompressionParams;
use razorkv_core::math::{Matrix, NormKind, NormParams};
use razorkv_core::model::{self as rt, fixtures};
use razorkv_core::scope::{self, ScopeInput, ScopePolicy};
use razorkv_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for razorkv_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

#[pyclass(frozen, module = "razorkv")]
struct Model {
    inner: Arc<rt::Model>,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Arc::new(rt::Model::load(&path).py()?) })
    }

    /// The hand-built two-layer model with a known induction head (L1H0)
    /// and echo head (L0H1).
    #[staticmethod]
    fn induction() -> PyResult<Self> {
        Ok(Self { inner: Arc::new(fixtures::induction_model().py()?) })
    }

    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn random_rope(seed: u64) -> PyResult<Self> {
        let m = fixtures::random_model(&fixtures::tiny_rope_spec(), seed).py()?;
        Ok(Self { inner: Arc::new(m) })
    }

    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn random_alibi(seed: u64) -> PyResult<Self> {
        let m = fixtures::random_model(&fixtures::tiny_alibi_spec(), seed).py()?;
        Ok(Self { inner: Arc::new(m) })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.spec().num_layers
    }

    #[getter]
    fn num_heads(&self) -> usize {
        self.inner.spec().num_heads
    }

    #[getter]
    fn num_kv_heads(&self) -> usize {
        self.inner.spec().num_kv_heads
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.spec().vocab_size
    }

    #[getter]
    fn max_context(&self) -> usize {
        self.inner.spec().max_context
    }

    #[getter]
    fn positional(&self) -> &'static str {
        self.inner.spec().positional.name()
    }

    /// Last-position logits from full attention over `tokens`.
    fn logits(&self, py: Python<'_>, tokens: Vec<u32>) -> PyResult<Vec<f32>> {
        let m = self.inner.clone();
        py.detach(move || m.reference_logits(&tokens)).py()
    }

    fn generate(&self, py: Python<'_>, prompt: Vec<u32>, steps: usize) -> PyResult<Vec<u32>> {
        let m = self.inner.clone();
        py.detach(move || m.reference_generate(&prompt, steps)).py()
    }

    fn __repr__(&self) -> String {
        let s = self.inner.spec();
        format!(
            "Model({}, layers={}, heads={}, kv_heads={}, {})",
            self.inner.fingerprint(),
            s.num_layers,
            s.num_heads,
            s.num_kv_heads,
            s.positional.name()
        )
    }
}

#[pyclass(frozen, module = "razorkv")]
struct HeadSet {
    inner: RetrievalHeadSet,
}

#[pymethods]
impl HeadSet {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: RetrievalHeadSet::load(&path).py()? })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self { inner: RetrievalHeadSet::from_toml(text).py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().py()
    }

    #[getter]
    fn model_id(&self) -> String {
        self.inner.model_id.clone()
    }

    /// `(layer, head)` pairs of the protected heads.
    #[getter]
    fn heads(&self) -> Vec<(usize, usize)> {
        self.inner.heads.iter().map(|h| (h.layer, h.head)).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __contains__(&self, id: (usize, usize)) -> bool {
        self.inner.contains(ident::HeadId::new(id.0, id.1))
    }

    fn __repr__(&self) -> String {
        let names: Vec<String> = self.inner.heads.iter().map(|h| h.id().to_string()).collect();
        format!("HeadSet([{}])", names.join(", "))
    }
}

/// Per-head `(layer, head, echo, induction)` scores from a repeated-sequence probe.
#[pyfunction]
#[pyo3(signature = (model, unique_tokens=64, repeats=4, seed=0))]
fn probe_scores(
    py: Python<'_>,
    model: &Model,
    unique_tokens: usize,
    repeats: usize,
    seed: u64,
) -> PyResult<Vec<(usize, usize, f64, f64)>> {
    let probe = ProbeSpec::new(unique_tokens, repeats, model.inner.spec().vocab_size, seed).py()?;
    let m = model.inner.clone();
    let report = py.detach(move || ident::probe_model(&m, &probe)).py()?;
    Ok(report.scores.iter().map(|s| (s.id.layer, s.id.head, s.echo, s.induction)).collect())
}

#[pyfunction]
#[pyo3(signature = (model, induction_frac=ident::DEFAULT_INDUCTION_FRAC, echo_frac=ident::DEFAULT_ECHO_FRAC, unique_tokens=64, repeats=4, seed=0))]
fn identify(
    py: Python<'_>,
    model: &Model,
    induction_frac: f64,
    echo_frac: f64,
    unique_tokens: usize,
    repeats: usize,
    seed: u64,
) -> PyResult<HeadSet> {
    let probe = ProbeSpec::new(unique_tokens, repeats, model.inner.spec().vocab_size, seed).py()?;
    let m = model.inner.clone();
    let report = py.detach(move || ident::probe_model(&m, &probe)).py()?;
    let set = ident::select_retrieval_heads(&report, &model.inner.fingerprint(), induction_frac, echo_frac).py()?;
    Ok(HeadSet { inner: set })
}

#[pyclass(frozen, from_py_object, module = "razorkv")]
#[derive(Clone)]
struct PolicyTable {
    inner: rt::PolicyTable,
}

#[pymethods]
impl PolicyTable {
    #[staticmethod]
    fn full(model: &Model) -> Self {
        Self { inner: rt::PolicyTable::full(model.inner.spec()) }
    }

    #[staticmethod]
    #[pyo3(signature = (model, window, sinks=4))]
    fn window(model: &Model, window: usize, sinks: usize) -> PyResult<Self> {
        Ok(Self { inner: rt::PolicyTable::window(model.inner.spec(), sinks, window).py()? })
    }

    #[staticmethod]
    #[pyo3(signature = (model, heads, ratio=5.0, threshold=4000, sinks=4))]
    fn razor(model: &Model, heads: &HeadSet, ratio: f64, threshold: usize, sinks: usize) -> PyResult<Self> {
        let params = CompressionParams::new(sinks, ratio, threshold).py()?;
        Ok(Self { inner: rt::PolicyTable::razor(model.inner.spec(), &heads.inner, params).py()? })
    }

    /// Window sizes from the ALiBi scope of each head.
    #[staticmethod]
    #[pyo3(signature = (model, epsilon=scope::DEFAULT_SCOPE_EPSILON))]
    fn alibi_scope(model: &Model, epsilon: f64) -> PyResult<Self> {
        let plan = scope::plan_alibi_caches(&model.inner, epsilon).py()?;
        Ok(Self { inner: plan.policy_table(&model.inner).py()? })
    }

    #[getter]
    fn retrieval_count(&self) -> usize {
        self.inner.retrieval_count()
    }

    fn policy(&self, layer: usize, head: usize) -> PyResult<String> {
        if layer >= self.inner.num_layers() || head >= self.inner.num_heads() {
            return Err(PyValueError::new_err(format!("no head L{layer}H{head}")));
        }
        Ok(format!("{:?}", self.inner.get(layer, head)))
    }
}

#[pyclass(module = "razorkv")]
struct Session {
    inner: rt::Session,
}

#[pymethods]
impl Session {
    #[new]
    #[pyo3(signature = (model, policies=None, evict_chunk=razorkv_core::kvcache::DEFAULT_EVICT_CHUNK))]
    fn new(model: &Model, policies: Option<PolicyTable>, evict_chunk: usize) -> PyResult<Self> {
        let table = match policies {
            Some(p) => p.inner,
            None => rt::PolicyTable::full(model.inner.spec()),
        };
        let inner = rt::Session::new(model.inner.clone(), table).py()?.with_evict_chunk(evict_chunk);
        Ok(Self { inner })
    }

    fn prefill(&mut self, py: Python<'_>, tokens: Vec<u32>) -> PyResult<Vec<f32>> {
        let s = &mut self.inner;
        py.detach(|| s.prefill(&tokens)).py()
    }

    fn decode_step(&mut self, token: u32) -> PyResult<Vec<f32>> {
        self.inner.decode_step(token).py()
    }

    fn generate(&mut self, py: Python<'_>, prompt: Vec<u32>, steps: usize) -> PyResult<Vec<u32>> {
        let s = &mut self.inner;
        py.detach(|| s.generate(&prompt, steps)).py()
    }

    #[getter]
    fn position(&self) -> usize {
        self.inner.position()
    }

    /// `(stored_entries, full_entries, ratio)` across all KV heads.
    fn memory(&self) -> (u64, u64, f64) {
        let r = self.inner.memory_report();
        (r.stored_entries, r.full_entries, r.ratio())
    }
}

fn matrix(rows: Vec<Vec<f64>>, name: &str) -> PyResult<Matrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err(format!("{name} is ragged")));
    }
    Matrix::new(r, c, rows.into_iter().flatten().collect()).py()
}

/// Distance beyond which an ALiBi head's attention weights stay below `epsilon`.
/// `wq` and `wk` are `hidden x head_dim`; omit `bias` for RMSNorm.
#[pyfunction]
#[pyo3(signature = (wq, wk, gamma, slope, epsilon=scope::DEFAULT_SCOPE_EPSILON, bias=None, norm_eps=1e-5))]
fn vision_scope(
    wq: Vec<Vec<f64>>,
    wk: Vec<Vec<f64>>,
    gamma: Vec<f64>,
    slope: f64,
    epsilon: f64,
    bias: Option<Vec<f64>>,
    norm_eps: f64,
) -> PyResult<f64> {
    let norm = match bias {
        None => NormParams::rms(gamma, norm_eps),
        Some(b) => NormParams::new(NormKind::LayerNorm, gamma, b, norm_eps),
    }
    .py()?;
    let input = ScopeInput::new(matrix(wq, "wq")?, matrix(wk, "wk")?, norm, slope, epsilon).py()?;
    scope::vision_scope(&input).py()
}

/// Per-head `(layer, head, slope, scope, window_or_None)` for an ALiBi model.
/// `None` means the head needs its full cache.
#[pyfunction]
#[pyo3(signature = (model, epsilon=scope::DEFAULT_SCOPE_EPSILON))]
fn alibi_plan(model: &Model, epsilon: f64) -> PyResult<Vec<(usize, usize, f64, f64, Option<u64>)>> {
    let plan = scope::plan_alibi_caches(&model.inner, epsilon).py()?;
    Ok(plan
        .heads
        .iter()
        .map(|h| {
            let window = match h.policy {
                ScopePolicy::Retrieval => None,
                ScopePolicy::Window => Some(h.l_h),
            };
            (h.layer, h.head, h.slope, h.scope, window)
        })
        .collect())
}

/// Needle and copy sweeps under full, window+sinks and razor caches; returns CSV text.
#[pyfunction]
#[pyo3(signature = (model, heads, context_len=512, depths=vec![0.0, 0.25, 0.5, 0.75, 1.0], samples=4, seed=0, ratio=5.0, threshold=4000, sinks=4))]
#[pyo3(name = "bench")]
#[allow(clippy::too_many_arguments)]
fn bench_csv(
    py: Python<'_>,
    model: &Model,
    heads: &HeadSet,
    context_len: usize,
    depths: Vec<f64>,
    samples: usize,
    seed: u64,
    ratio: f64,
    threshold: usize,
    sinks: usize,
) -> PyResult<String> {
    let cfg = BenchConfig::new(heads.inner.clone(), CompressionParams::new(sinks, ratio, threshold).py()?);
    let mut tasks = TaskSpec::sweep(TaskKind::NeedleRetrieval, context_len, &depths, samples, seed).py()?;
    tasks.extend(
        TaskSpec::sweep(TaskKind::CopyTask { span: razorkv_core::bench::DEFAULT_COPY_SPAN }, context_len, &depths, samples, seed)
            .py()?,
    );
    let m = model.inner.clone();
    let report = py.detach(move || run_bench(&m, &PolicyKind::ALL, &tasks, &cfg));
    if let Some(f) = report.failures.first() {
        return Err(PyValueError::new_err(format!("{}: {}", f.task, f.error)));
    }
    let mut buf = Vec::new();
    write_csv(&report, &mut buf).py()?;
    String::from_utf8(buf).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn razorkv(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<HeadSet>()?;
    m.add_class::<PolicyTable>()?;
    m.add_class::<Session>()?;
    m.add_function(wrap_pyfunction!(probe_scores, m)?)?;
    m.add_function(wrap_pyfunction!(identify, m)?)?;
    m.add_function(wrap_pyfunction!(vision_scope, m)?)?;
    m.add_function(wrap_pyfunction!(alibi_plan, m)?)?;
    m.add_function(wrap_pyfunction!(bench_csv, m)?)?;
    Ok(())
}
