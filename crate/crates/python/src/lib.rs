//! Python bindings for `sgkit`.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sgkit::conditions::{self, LayerStats as CoreLayerStats, SolvedLayer};
use sgkit::config::{ExperimentConfig, InitMode};
use sgkit::experiment;
use sgkit::surrogate::{self, Shape, SurrogateSpec};
use sgkit::Error;

create_exception!(sgkit_py, InfeasibleError, PyException);

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Infeasible { .. } => InfeasibleError::new_err(err.to_string()),
        Error::Io(_) => PyIOError::new_err(err.to_string()),
        Error::Numeric(_) | Error::Quadrature { .. } | Error::State(_) => PyRuntimeError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

/// A surrogate pseudo-derivative `γ·f(s·v)`.
#[pyclass(name = "Surrogate", frozen)]
struct PySurrogate {
    inner: SurrogateSpec,
}

#[pymethods]
impl PySurrogate {
    #[new]
    #[pyo3(signature = (shape, gamma=1.0, sharpness=1.0, q=2.0))]
    fn new(shape: &str, gamma: f64, sharpness: f64, q: f64) -> PyResult<Self> {
        let shape = Shape::parse(shape, q).map_err(to_py)?;
        let inner = SurrogateSpec::new(shape, gamma, sharpness).map_err(to_py)?;
        Ok(PySurrogate { inner })
    }

    #[getter]
    fn shape(&self) -> &'static str {
        self.inner.shape.name()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }

    #[getter]
    fn sharpness(&self) -> f64 {
        self.inner.sharpness
    }

    fn __call__(&self, v: f64) -> f64 {
        self.inner.pseudo_derivative(v)
    }

    /// Pseudo-derivative at each voltage.
    fn derivative(&self, v: Vec<f64>) -> Vec<f64> {
        v.iter().map(|&x| self.inner.pseudo_derivative(x)).collect()
    }

    /// Area under the unit-scale shape.
    fn area(&self) -> f64 {
        self.inner.shape_area()
    }

    /// `E[σ′²]` under a uniform voltage prior on `[y_min, y_max]`.
    fn second_moment(&self, y_min: f64, y_max: f64, thr: f64) -> PyResult<f64> {
        let s = self.inner;
        conditions::sg_second_moment(s.shape, s.gamma, s.sharpness, y_min, y_max, thr).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Surrogate(shape='{}', gamma={}, sharpness={})",
            self.inner.shape.name(),
            self.inner.gamma,
            self.inner.sharpness
        )
    }
}

/// Statistics one layer's conditions depend on.
#[pyclass(name = "LayerStats", frozen)]
struct PyLayerStats {
    inner: CoreLayerStats,
}

#[pymethods]
impl PyLayerStats {
    /// Layer fed by data with mean `mean_z` and variance `var_z`.
    #[staticmethod]
    fn data(n_in: usize, n_rec: usize, alpha: f64, thr: f64, mean_z: f64, var_z: f64) -> Self {
        PyLayerStats { inner: CoreLayerStats::data(n_in, n_rec, alpha, thr, mean_z, var_z) }
    }

    /// Layer fed by a spiking layer below firing half of the time.
    #[staticmethod]
    fn stacked(n_in: usize, n_rec: usize, alpha: f64, thr: f64) -> Self {
        PyLayerStats { inner: CoreLayerStats::stacked(n_in, n_rec, alpha, thr) }
    }

    /// Mean recurrent weight that keeps the firing rate at one half.
    fn cond1_mean_wrec(&self) -> PyResult<f64> {
        conditions::cond1_mean_wrec(&self.inner).map_err(to_py)
    }

    /// Recurrent weight variance that keeps the voltage variance stable.
    fn cond2_var_wrec(&self, mean_w_rec: f64) -> PyResult<f64> {
        conditions::cond2_var_wrec(&self.inner, mean_w_rec).map_err(to_py)
    }

    /// Dampening that keeps the gradient step ratio below one.
    fn cond3_dampening(&self, w_rec_min: f64, w_rec_max: f64) -> PyResult<f64> {
        conditions::cond3_dampening(&self.inner, w_rec_min, w_rec_max).map_err(to_py)
    }

    /// Target `E[σ′²]` for a stable gradient variance.
    fn cond4_target_moment(&self, e_w_rec_sq: f64) -> PyResult<f64> {
        conditions::cond4_target_moment(&self.inner, e_w_rec_sq).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// An experiment configuration of `key=value` settings.
#[pyclass(name = "Config")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults, optionally overridden by keyword settings such as
    /// `Config(**{"model.n_rec": 32})`.
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = PyConfig { inner: ExperimentConfig::default() };
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                cfg.set(&k.extract::<String>()?, &v.str()?.to_string())?;
            }
        }
        Ok(cfg)
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        ExperimentConfig::parse(text).map(|inner| PyConfig { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        ExperimentConfig::load(&path).map(|inner| PyConfig { inner }).map_err(to_py)
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, output_dir='{}')", self.inner.seed, self.inner.output_dir.display())
    }
}

fn layer_dict<'py>(py: Python<'py>, l: usize, s: &SolvedLayer) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("layer", l)?;
    d.set_item("mean_w_rec", s.init.mean_w_rec)?;
    d.set_item("var_w_rec", s.init.var_w_rec)?;
    d.set_item("gamma", s.init.gamma)?;
    d.set_item("sharpness", s.init.sharpness)?;
    d.set_item("target_second_moment", s.init.target_second_moment)?;
    d.set_item("attained_second_moment", s.init.attained_second_moment)?;
    d.set_item("y_min", s.init.y_min)?;
    d.set_item("y_max", s.init.y_max)?;
    d.set_item("feasible", s.init.feasible)?;
    d.set_item("reason", s.init.reason.clone())?;
    Ok(d)
}

/// Solve the conditions for every layer of `config` on its task's input
/// statistics. Infeasible layers are reported, not raised, unless
/// `init.on_infeasible=fail`.
#[pyfunction]
fn init_solve<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = &config.inner;
    cfg.validate().map_err(to_py)?;
    let task = experiment::load_task(cfg).map_err(to_py)?;
    let stats = task.train.stats().map_err(to_py)?;
    let mut cfg = cfg.clone();
    cfg.init.mode = InitMode::Conditioned;
    let (_, solved) = experiment::build_network(&cfg, task.train.channels, task.classes, stats).map_err(to_py)?;
    solved
        .unwrap_or_default()
        .iter()
        .enumerate()
        .map(|(l, s)| layer_dict(py, l, s))
        .collect()
}

/// Train one network; returns per-epoch records.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = config.inner.clone();
    cfg.validate().map_err(to_py)?;
    let (_, history) = py.detach(|| experiment::run_training(&cfg)).map_err(to_py)?;
    history
        .epochs
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("train_loss", r.train_loss)?;
            d.set_item("val_loss", r.val_loss)?;
            d.set_item("val_mode_acc", r.val_mode_acc)?;
            Ok(d)
        })
        .collect()
}

/// Train over the configured sweep grid; returns one record per cell.
#[pyfunction]
fn sweep<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = config.inner.clone();
    cfg.validate().map_err(to_py)?;
    let rows = py.detach(|| experiment::run_sweep(&cfg)).map_err(to_py)?;
    rows.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("axis", r.axis.to_string())?;
            d.set_item("value", &r.value)?;
            d.set_item("seed", r.seed)?;
            d.set_item("final_val_acc", r.final_val_acc)?;
            d.set_item("final_val_loss", r.final_val_loss)?;
            d.set_item("status", &r.status)?;
            Ok(d)
        })
        .collect()
}

/// Firing, voltage and gradient statistics of the initialized network, one
/// record per time step and layer.
#[pyfunction]
fn probe<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut cfg = config.inner.clone();
    cfg.validate().map_err(to_py)?;
    let dir = std::env::temp_dir().join(format!("sgkit-probe-{}", std::process::id()));
    cfg.output_dir = dir.clone();
    let rows = py.detach(|| experiment::cmd_probe(&cfg)).map_err(to_py)?;
    let _ = std::fs::remove_dir_all(&dir);
    rows.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("t", r.t)?;
            d.set_item("layer", r.layer)?;
            d.set_item("firing_rate", r.firing_rate)?;
            d.set_item("mean_v", r.mean_v)?;
            d.set_item("median_v", r.median_v)?;
            d.set_item("var_v", r.var_v)?;
            d.set_item("recurrent_term_var", r.recurrent_term_var)?;
            d.set_item("input_term_var", r.input_term_var)?;
            d.set_item("grad_var", r.grad_var)?;
            d.set_item("grad_max", r.grad_max)?;
            Ok(d)
        })
        .collect()
}

/// Smallest sharpness whose `E[σ′²]` matches `target`; returns
/// `(sharpness, moment, feasible)`.
#[pyfunction]
#[pyo3(signature = (shape, gamma, target, y_min, y_max, thr, q=2.0))]
fn solve_sharpness(shape: &str, gamma: f64, target: f64, y_min: f64, y_max: f64, thr: f64, q: f64) -> PyResult<(f64, f64, bool)> {
    let shape = Shape::parse(shape, q).map_err(to_py)?;
    let s = conditions::solve_sharpness(shape, gamma, target, y_min, y_max, thr).map_err(to_py)?;
    Ok((s.sharpness, s.moment, s.feasible))
}

/// Spike time of a pixel with intensity `x`, or `None` when it stays silent.
#[pyfunction]
#[pyo3(signature = (x, theta=0.2, tau=50.0))]
fn latency_encode(x: f64, theta: f64, tau: f64) -> Option<f64> {
    sgkit::data::latency_encode(x, theta, tau)
}

/// Forward spike nonlinearity.
#[pyfunction]
fn heaviside(v: f64) -> f64 {
    surrogate::heaviside(v)
}

/// Names of the supported surrogate shapes.
#[pyfunction]
fn shapes() -> Vec<&'static str> {
    Shape::all(2.0).iter().map(|s| s.name()).collect()
}

#[pymodule]
fn sgkit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySurrogate>()?;
    m.add_class::<PyLayerStats>()?;
    m.add_class::<PyConfig>()?;
    m.add("InfeasibleError", m.py().get_type::<InfeasibleError>())?;
    m.add_function(wrap_pyfunction!(init_solve, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(probe, m)?)?;
    m.add_function(wrap_pyfunction!(solve_sharpness, m)?)?;
    m.add_function(wrap_pyfunction!(latency_encode, m)?)?;
    m.add_function(wrap_pyfunction!(heaviside, m)?)?;
    m.add_function(wrap_pyfunction!(shapes, m)?)?;
    Ok(())
}
