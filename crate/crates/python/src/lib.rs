//! Python bindings: a `Dataset` class plus one function per analysis.
//! Results come back as plain dicts and lists.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;
use std::collections::HashMap;

use metabias_core::bma::{bma_screen, BmaConfig};
use metabias_core::dataset::{self, EffectEstimate, MetaDataset, ModeratorEntry, ModeratorKind, ModeratorSchema};
use metabias_core::ensemble::{
    build_model_space, fit_ensemble, log_likelihood as core_log_likelihood, BiasKind, EnsembleConfig,
    EnsembleReport, ModelSpec, ParamPoint,
};
use metabias_core::metareg::{coefficient_table, reml_fit};
use metabias_core::pooling::uwls;
use metabias_core::simulate::{generate, SimConfig};
use metabias_core::{Error, ErrorKind};

fn to_py(e: Error) -> PyErr {
    match e.kind() {
        ErrorKind::Validation => PyValueError::new_err(e.to_string()),
        ErrorKind::Numerical => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Round-trips a serialisable value through JSON into Python objects.
fn to_object<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// A validated collection of effect estimates clustered by study.
#[pyclass(name = "Dataset", module = "metabias", frozen)]
struct Dataset {
    inner: MetaDataset,
}

#[pymethods]
impl Dataset {
    /// Builds a dataset from parallel lists. `moderators` maps a name to a
    /// column of values; names listed in `binary` must hold 0/1.
    #[staticmethod]
    #[pyo3(signature = (study_ids, thetas, ses, moderators=None, binary=None, estimate_ids=None))]
    fn from_records(
        study_ids: Vec<String>,
        thetas: Vec<f64>,
        ses: Vec<f64>,
        moderators: Option<HashMap<String, Vec<f64>>>,
        binary: Option<Vec<String>>,
        estimate_ids: Option<Vec<String>>,
    ) -> PyResult<Self> {
        let n = thetas.len();
        if study_ids.len() != n || ses.len() != n || estimate_ids.as_ref().is_some_and(|e| e.len() != n) {
            return Err(PyValueError::new_err("all columns must have the same length"));
        }
        let moderators = moderators.unwrap_or_default();
        let binary = binary.unwrap_or_default();
        let mut names: Vec<&String> = moderators.keys().collect();
        names.sort();
        if let Some(b) = binary.iter().find(|b| !moderators.contains_key(*b)) {
            return Err(PyValueError::new_err(format!("binary moderator `{b}` has no column")));
        }
        let schema = ModeratorSchema::new(
            names
                .iter()
                .map(|&name| {
                    let kind = if binary.contains(name) { ModeratorKind::Binary } else { ModeratorKind::Continuous };
                    ModeratorEntry::new(name.clone(), kind)
                })
                .collect(),
        )
        .map_err(to_py)?;
        let mut estimates = Vec::with_capacity(n);
        for i in 0..n {
            let id = estimate_ids.as_ref().map_or_else(|| (i + 1).to_string(), |e| e[i].clone());
            let mut e = EffectEstimate::new(id, study_ids[i].clone(), thetas[i], ses[i]);
            for &name in &names {
                let col = &moderators[name];
                if col.len() != n {
                    return Err(PyValueError::new_err(format!("moderator `{name}` has {} values, expected {n}", col.len())));
                }
                e = e.with_moderator(name.clone(), col[i]);
            }
            estimates.push(e);
        }
        let inner = MetaDataset::new(estimates, schema, "python").map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Loads a dataset CSV; the moderator schema is inferred unless a
    /// schema JSON path is given.
    #[staticmethod]
    #[pyo3(signature = (path, schema=None))]
    fn from_csv(path: &str, schema: Option<&str>) -> PyResult<Self> {
        let inner = match schema {
            Some(s) => {
                let schema = ModeratorSchema::from_json_file(s).map_err(to_py)?;
                dataset::load_csv(path, &schema)
            }
            None => dataset::load_csv_inferred(path),
        }
        .map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_csv(&self, path: &str) -> PyResult<()> {
        let f = std::fs::File::create(path).map_err(|e| PyValueError::new_err(e.to_string()))?;
        dataset::write_csv(&self.inner, f).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({} estimates, {} studies, moderators={:?})",
            self.inner.len(),
            self.inner.n_studies(),
            self.inner.schema().names().collect::<Vec<_>>()
        )
    }

    #[getter]
    fn thetas(&self) -> Vec<f64> {
        self.inner.thetas()
    }

    #[getter]
    fn ses(&self) -> Vec<f64> {
        self.inner.ses()
    }

    #[getter]
    fn study_ids(&self) -> Vec<String> {
        self.inner.study_ids().into_iter().map(String::from).collect()
    }

    #[getter]
    fn n_studies(&self) -> usize {
        self.inner.n_studies()
    }

    #[getter]
    fn moderator_names(&self) -> Vec<String> {
        self.inner.schema().names().map(String::from).collect()
    }

    fn column(&self, name: &str) -> PyResult<Vec<f64>> {
        self.inner.column(name).map_err(to_py)
    }

    /// Returns `(retained, excluded_ids)` under the ten-IQR rule.
    fn filter_outliers(&self) -> PyResult<(Dataset, Vec<String>)> {
        let (inner, excluded) = dataset::filter_outliers(&self.inner).map_err(to_py)?;
        Ok((Dataset { inner }, excluded))
    }

    fn describe<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_object(py, &dataset::describe(&self.inner))
    }
}

/// Precision-weighted mean with study-clustered standard error.
#[pyfunction]
fn pool<'py>(py: Python<'py>, data: &Dataset) -> PyResult<Bound<'py, PyAny>> {
    to_object(py, &uwls(&data.inner).map_err(to_py)?)
}

/// Fits the 20-model publication-bias ensemble. Returns the report and the
/// model-averaged weight function sampled every `weightfn_step`.
#[pyfunction]
#[pyo3(signature = (data, seed=0, chains=4, iters=5000, burn_in=1000, weightfn_step=0.005))]
fn bias<'py>(
    py: Python<'py>,
    data: &Dataset,
    seed: u64,
    chains: usize,
    iters: usize,
    burn_in: usize,
    weightfn_step: f64,
) -> PyResult<Bound<'py, PyAny>> {
    if !(weightfn_step > 0.0 && weightfn_step <= 1.0) {
        return Err(PyValueError::new_err("weightfn_step must lie in (0, 1]"));
    }
    let mut cfg = EnsembleConfig::default();
    cfg.sampler.chains = chains;
    cfg.sampler.iterations = iters;
    cfg.sampler.burn_in = burn_in;
    cfg.sampler.validate().map_err(to_py)?;
    let inner = &data.inner;
    let (posteriors, summary) = py.detach(|| fit_ensemble(inner, &cfg, seed)).map_err(to_py)?;
    let report = EnsembleReport::new(inner.len(), &posteriors, summary);
    #[derive(Serialize)]
    struct Out {
        report: EnsembleReport,
        weightfn: Vec<metabias_core::ensemble::WeightFnPoint>,
    }
    let weightfn = report.weight_function(weightfn_step);
    to_object(py, &Out { report, weightfn })
}

/// Three-level REML meta-regression with a coefficient table.
#[pyfunction]
#[pyo3(signature = (data, moderators=Vec::new()))]
fn metareg<'py>(py: Python<'py>, data: &Dataset, moderators: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    let fit = reml_fit(&data.inner, &moderators).map_err(to_py)?;
    let table = coefficient_table(&fit);
    let out = py.import("json")?.call_method1(
        "loads",
        (serde_json::json!({ "fit": fit, "coefficients": table }).to_string(),),
    )?;
    Ok(out)
}

/// Posterior inclusion probabilities over all candidate subsets.
#[pyfunction]
#[pyo3(signature = (data, candidates, forced=vec!["se".to_string()], threshold=0.1, precision_weighted=false))]
fn screen<'py>(
    py: Python<'py>,
    data: &Dataset,
    candidates: Vec<String>,
    forced: Vec<String>,
    threshold: f64,
    precision_weighted: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let config = BmaConfig { precision_weighted, ..Default::default() };
    let inner = &data.inner;
    let r = py
        .detach(|| bma_screen(inner, &candidates, &forced, threshold, &config))
        .map_err(to_py)?;
    to_object(py, &r)
}

/// Simulates a dataset from a config dict (same keys as the CLI's
/// simulation JSON; omitted keys take their defaults).
#[pyfunction]
#[pyo3(signature = (config=None))]
fn simulate(py: Python<'_>, config: Option<&Bound<'_, PyAny>>) -> PyResult<Dataset> {
    let defaults = serde_json::to_value(SimConfig::default()).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let mut merged = defaults;
    if let Some(c) = config {
        let text: String = py.import("json")?.call_method1("dumps", (c,))?.extract()?;
        let given: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let Some(obj) = given.as_object() else {
            return Err(PyValueError::new_err("config must be a dict"));
        };
        for (k, v) in obj {
            merged[k] = v.clone();
        }
    }
    let cfg = SimConfig::from_json(&merged.to_string()).map_err(to_py)?;
    let inner = py.detach(|| generate(&cfg)).map_err(to_py)?;
    Ok(Dataset { inner })
}

/// The 20 ensemble model specifications.
#[pyfunction]
fn model_space<'py>(py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
    to_object(py, &build_model_space())
}

/// Log-likelihood of one ensemble model at a parameter point. `omega` is
/// the full weight vector starting with 1.
#[pyfunction]
#[pyo3(signature = (data, has_effect, has_heterogeneity, bias_kind, mu=0.0, tau=0.0, omega=None, slope=0.0))]
#[allow(clippy::too_many_arguments)]
fn log_likelihood(
    data: &Dataset,
    has_effect: bool,
    has_heterogeneity: bool,
    bias_kind: &str,
    mu: f64,
    tau: f64,
    omega: Option<Vec<f64>>,
    slope: f64,
) -> PyResult<f64> {
    let kind: BiasKind = serde_json::from_value(serde_json::Value::String(bias_kind.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown bias kind `{bias_kind}`")))?;
    let spec = ModelSpec::new(has_effect, has_heterogeneity, kind);
    let point = ParamPoint { mu, tau, omega, slope };
    core_log_likelihood(&spec, &point, &data.inner).map_err(to_py)
}

#[pymodule]
fn metabias(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Dataset>()?;
    m.add_function(wrap_pyfunction!(pool, m)?)?;
    m.add_function(wrap_pyfunction!(bias, m)?)?;
    m.add_function(wrap_pyfunction!(metareg, m)?)?;
    m.add_function(wrap_pyfunction!(screen, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(model_space, m)?)?;
    m.add_function(wrap_pyfunction!(log_likelihood, m)?)?;
    Ok(())
}
