use std::path::PathBuf;

use klmpc::controller::sontag_law;
use klmpc::pipeline::Pipeline;
use klmpc::simulator::error_bound;
use klmpc::{Error, KoopmanBilinearModel};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Identified bilinear model loaded from a `model.json` artifact.
#[pyclass(frozen)]
struct Model {
    inner: KoopmanBilinearModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = KoopmanBilinearModel::load(&path).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    /// Continuous-time eigenvalues as `(re, im)` pairs.
    fn eigenvalues(&self) -> Vec<(f64, f64)> {
        self.inner.spectrum.continuous_eigenvalues.iter().map(|l| (l.re, l.im)).collect()
    }

    fn lift(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.lift(&x).map_err(to_py)?.iter().copied().collect())
    }

    fn reconstruct(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        if z.len() != self.inner.dim() {
            return Err(PyValueError::new_err(format!("expected {} lifted coordinates, got {}", self.inner.dim(), z.len())));
        }
        let z = nalgebra::DVector::from_vec(z);
        Ok(self.inner.reconstruct(&z).iter().copied().collect())
    }

    fn __repr__(&self) -> String {
        format!("Model(dim={}, n_states={})", self.inner.dim(), self.inner.n_states())
    }
}

/// Runs one stage (`gen-data`, `identify`, `synthesize-clf`, `simulate`,
/// `report`) or every stage (`run`). Returns the report JSON for `report` and
/// `run`, otherwise None.
#[pyfunction]
#[pyo3(signature = (stage, config, out=None))]
fn run_stage(py: Python<'_>, stage: &str, config: PathBuf, out: Option<PathBuf>) -> PyResult<Option<String>> {
    let pipeline = Pipeline::from_path(&config, out).map_err(to_py)?;
    let report = py.detach(|| match stage {
        "gen-data" => pipeline.gen_data().map(|_| None),
        "identify" => pipeline.identify().map(|_| None),
        "synthesize-clf" => pipeline.synthesize_clf().map(|_| None),
        "simulate" => pipeline.simulate().map(|_| None),
        "report" => pipeline.report().map(Some),
        "run" => pipeline.run().map(Some),
        other => Err(Error::Config(format!("unknown stage {other:?}"))),
    });
    match report.map_err(to_py)? {
        Some(r) => Ok(Some(serde_json::to_string(&r).map_err(|e| PyRuntimeError::new_err(e.to_string()))?)),
        None => Ok(None),
    }
}

#[pyfunction]
#[pyo3(signature = (config, out=None))]
fn run_pipeline(py: Python<'_>, config: PathBuf, out: Option<PathBuf>) -> PyResult<String> {
    Ok(run_stage(py, "run", config, out)?.expect("full run returns a report"))
}

/// Unsaturated Sontag feedback from `L_Λ V` and `L_B V`.
#[pyfunction(name = "sontag_law")]
fn py_sontag_law(l_lambda_v: f64, l_b_v: f64) -> f64 {
    sontag_law(l_lambda_v, l_b_v)
}

/// Prediction-error bound at time `t`.
#[pyfunction(name = "error_bound")]
#[pyo3(signature = (nu, l_x, t, e0=0.0))]
fn py_error_bound(nu: f64, l_x: f64, t: f64, e0: f64) -> f64 {
    error_bound(nu, l_x, e0, t)
}

#[pymodule]
fn klmpc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(py_sontag_law, m)?)?;
    m.add_function(wrap_pyfunction!(py_error_bound, m)?)?;
    Ok(())
}
