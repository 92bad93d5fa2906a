//! Python bindings. Images cross the boundary as flat row-major lists of floats in
//! `[0, 1]` plus an explicit `(channels, height, width)` shape.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use himamba_core::imaging::{self, Upscaler};
use himamba_core::{Error, HiMambaConfig, ModelWeights, Tensor};

type Shape3 = (usize, usize, usize);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn tensor(data: Vec<f64>, shape: Shape3) -> PyResult<Tensor> {
    Tensor::new([shape.0, shape.1, shape.2], data).map_err(to_py)
}

fn unpack(t: Tensor) -> (Vec<f64>, Shape3) {
    let s = t.shape();
    let shape = (s[0], s[1], s[2]);
    (t.into_data(), shape)
}

/// Model hyperparameters.
#[pyclass(name = "Config", module = "himamba", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: HiMambaConfig,
}

#[pymethods]
impl PyConfig {
    /// Named preset (`"tiny"`, `"mini"`) or path to a JSON file.
    #[new]
    fn new(spec: &str) -> PyResult<Self> {
        Ok(Self { inner: HiMambaConfig::load(spec).map_err(to_py)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: HiMambaConfig::from_json(text).map_err(to_py)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn scale(&self) -> usize {
        self.inner.scale
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    fn count_params(&self) -> PyResult<u64> {
        himamba_core::count_params(&self.inner).map_err(to_py)
    }

    fn count_flops(&self, height: usize, width: usize) -> PyResult<u64> {
        himamba_core::count_flops(&self.inner, height, width).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Config({})", self.inner.to_json())
    }
}

/// Network weights.
#[pyclass(name = "Model", module = "himamba")]
struct PyModel {
    inner: ModelWeights,
}

#[pymethods]
impl PyModel {
    /// Seeded random initialization.
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &PyConfig, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: ModelWeights::init(&config.inner, seed).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: ModelWeights::load(path).map_err(to_py)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig { inner: self.inner.config.clone() }
    }

    fn num_params(&self) -> usize {
        self.inner.num_elements()
    }

    /// Super-resolves a `[3, H, W]` image; returns `(data, shape)`.
    #[pyo3(signature = (data, shape, self_ensemble = false))]
    fn upscale(&self, py: Python<'_>, data: Vec<f64>, shape: Shape3, self_ensemble: bool) -> PyResult<(Vec<f64>, Shape3)> {
        let img = tensor(data, shape)?;
        let out = py
            .detach(|| if self_ensemble { imaging::self_ensemble(&img, &self.inner) } else { self.inner.upscale(&img) })
            .map_err(to_py)?;
        Ok(unpack(out))
    }
}

#[pyfunction]
fn rgb_to_y(data: Vec<f64>, shape: Shape3) -> PyResult<(Vec<f64>, Shape3)> {
    Ok(unpack(imaging::rgb_to_y(&tensor(data, shape)?).map_err(to_py)?))
}

#[pyfunction]
fn bicubic_resize(data: Vec<f64>, shape: Shape3, out_w: usize, out_h: usize) -> PyResult<(Vec<f64>, Shape3)> {
    Ok(unpack(imaging::bicubic_resize(&tensor(data, shape)?, out_w, out_h).map_err(to_py)?))
}

#[pyfunction]
#[pyo3(signature = (a, b, shape, shave = 0))]
fn psnr(a: Vec<f64>, b: Vec<f64>, shape: Shape3, shave: usize) -> PyResult<f64> {
    imaging::psnr(&tensor(a, shape)?, &tensor(b, shape)?, shave).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (a, b, shape, shave = 0))]
fn ssim(a: Vec<f64>, b: Vec<f64>, shape: Shape3, shave: usize) -> PyResult<f64> {
    imaging::ssim(&tensor(a, shape)?, &tensor(b, shape)?, shave).map_err(to_py)
}

/// Runs the built-in checks; returns `(name, passed, message)` triples.
#[pyfunction]
#[pyo3(signature = (filter = None))]
fn verify(py: Python<'_>, filter: Option<String>) -> Vec<(String, bool, String)> {
    py.detach(|| himamba_core::verify::run_checks(filter.as_deref()))
        .into_iter()
        .map(|(name, r)| (name.to_string(), r.is_ok(), r.err().unwrap_or_default()))
        .collect()
}

#[pymodule]
fn himamba(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(rgb_to_y, m)?)?;
    m.add_function(wrap_pyfunction!(bicubic_resize, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
