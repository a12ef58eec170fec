//! Python bindings: channel generation, transforms, the feedback link,
//! quantization, metrics, experiment runs and trained-model inference.

use std::path::Path;

use num_complex::Complex64;
use numpy::ndarray::{Array1, Array2, Array3};
use numpy::{IntoPyArray, PyArray1, PyArray2, PyArray3, PyReadonlyArray1, PyReadonlyArray2};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use csi_djscc::data_gen::{generate_dataset, load_dataset, save_dataset, ChannelScenario, CsiDataset, CsiSamplePair, Split};
use csi_djscc::evaluation::{self, eval_pipeline, SweepResult};
use csi_djscc::experiments::{self, load_model, ExperimentConfig, RunPaths};
use csi_djscc::phy::{self, ChannelConfig, FeedbackSymbols, SnrDb};
use csi_djscc::pipelines::{Link, Pipeline};
use csi_djscc::quant::{self, QuantizerSpec};
use csi_djscc::transforms::{self, AngularDelayMatrix, TruncationSpec};
use csi_djscc::{ComplexMatrix, Error};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(a: &PyReadonlyArray2<Complex64>) -> PyResult<ComplexMatrix> {
    let v = a.as_array();
    let (r, c) = v.dim();
    ComplexMatrix::from_vec(r, c, v.iter().copied().collect()).map_err(err)
}

fn array<'py>(py: Python<'py>, m: &ComplexMatrix) -> Bound<'py, PyArray2<Complex64>> {
    Array2::from_shape_vec(m.shape(), m.as_slice().to_vec())
        .expect("matrix layout is row-major")
        .into_pyarray_bound(py)
}

fn snr(db: f64) -> PyResult<SnrDb> {
    SnrDb::new(db).map_err(err)
}

fn split(name: &str) -> PyResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(PyValueError::new_err(format!("unknown split `{name}` (train, val, test)"))),
    }
}

/// Geometry and multipath statistics of the synthetic channel.
#[pyclass(name = "ChannelScenario", module = "csi_djscc")]
#[derive(Clone)]
struct PyScenario(ChannelScenario);

#[pymethods]
impl PyScenario {
    #[staticmethod]
    fn desk() -> Self {
        Self(ChannelScenario::desk())
    }

    #[staticmethod]
    fn full() -> Self {
        Self(ChannelScenario::full())
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let s: ChannelScenario = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        s.validate().map_err(err)?;
        Ok(Self(s))
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn n_tx(&self) -> usize {
        self.0.n_tx
    }

    #[getter]
    fn n_sub(&self) -> usize {
        self.0.n_sub
    }

    #[getter]
    fn n_trunc(&self) -> usize {
        self.0.n_trunc
    }

    /// Generates train/val/test splits; each sample depends only on the
    /// scenario, the seed and its index.
    #[pyo3(signature = (n_train, n_val, n_test, seed=0))]
    fn generate(&self, py: Python<'_>, n_train: usize, n_val: usize, n_test: usize, seed: u64) -> PyResult<PyDataset> {
        let s = self.0.clone();
        py.allow_threads(|| generate_dataset(&s, n_train, n_val, n_test, seed))
            .map(PyDataset)
            .map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "ChannelScenario(n_sub={}, n_tx={}, n_trunc={}, paths={})",
            self.0.n_sub,
            self.0.n_tx,
            self.0.n_trunc,
            self.0.total_paths()
        )
    }
}

/// Paired downlink/uplink CSI in three splits.
#[pyclass(name = "Dataset", module = "csi_djscc")]
struct PyDataset(CsiDataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        load_dataset(Path::new(dir)).map(Self).map_err(err)
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        save_dataset(&self.0, Path::new(dir)).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    /// `(h_down, h_up)`, each `n x n_sub x n_tx` complex.
    fn split<'py>(
        &self,
        py: Python<'py>,
        name: &str,
    ) -> PyResult<(Bound<'py, PyArray3<Complex64>>, Bound<'py, PyArray3<Complex64>>)> {
        let pairs = self.0.split(split(name)?);
        let (r, c) = (self.0.scenario().n_sub, self.0.scenario().n_tx);
        let stack = |f: fn(&CsiSamplePair) -> &ComplexMatrix| {
            let data = pairs.iter().flat_map(|p| f(p).as_slice().iter().copied()).collect();
            Array3::from_shape_vec((pairs.len(), r, c), data).expect("uniform sample shape")
        };
        Ok((
            stack(|p| &p.h_down).into_pyarray_bound(py),
            stack(|p| &p.h_up).into_pyarray_bound(py),
        ))
    }

    /// `(re_min, re_max, im_min, im_max)` of the training downlink.
    fn stats(&self) -> (f64, f64, f64, f64) {
        let s = self.0.stats();
        (s.re_min, s.re_max, s.im_min, s.im_max)
    }

    fn mean_retained_energy(&self, name: &str) -> PyResult<f64> {
        Ok(self.0.mean_retained_energy(split(name)?))
    }

    fn content_hash(&self) -> String {
        self.0.content_hash()
    }

    #[getter]
    fn scenario(&self) -> PyScenario {
        PyScenario(self.0.scenario().clone())
    }
}

/// Companded uniform scalar quantizer on [-1, 1].
#[pyclass(name = "Quantizer", module = "csi_djscc")]
#[derive(Clone)]
struct PyQuantizer(QuantizerSpec);

#[pymethods]
impl PyQuantizer {
    #[new]
    #[pyo3(signature = (bits, mu=None))]
    fn new(bits: u32, mu: Option<f64>) -> PyResult<Self> {
        let mu = mu.unwrap_or(QuantizerSpec::default().companding_mu);
        QuantizerSpec::new(bits, mu).map(Self).map_err(err)
    }

    #[getter]
    fn bits(&self) -> u32 {
        self.0.bits
    }

    #[getter]
    fn levels(&self) -> u16 {
        self.0.levels()
    }

    fn quantize<'py>(&self, py: Python<'py>, x: PyReadonlyArray1<f64>) -> PyResult<Bound<'py, PyArray1<u16>>> {
        Ok(Array1::from(self.0.quantize(x.as_slice()?)).into_pyarray_bound(py))
    }

    fn dequantize<'py>(&self, py: Python<'py>, idx: PyReadonlyArray1<u16>) -> PyResult<Bound<'py, PyArray1<f64>>> {
        let idx = idx.as_slice()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.0.levels()) {
            return Err(PyValueError::new_err(format!("index {bad} outside {} levels", self.0.levels())));
        }
        Ok(Array1::from(self.0.dequantize(idx)).into_pyarray_bound(py))
    }

    /// Largest round-trip error of any value that lands in cell `idx`.
    fn cell_error_bound(&self, idx: u16) -> f64 {
        self.0.cell_error_bound(idx)
    }
}

/// A trained network from an experiment run, used for inference.
#[pyclass(name = "TrainedModel", module = "csi_djscc")]
struct PyModel {
    label: String,
    pipeline: Pipeline<f32>,
}

#[pymethods]
impl PyModel {
    /// Loads model `label` of experiment `config` (a preset name or a JSON
    /// file) from the output tree under `root`.
    #[staticmethod]
    fn from_run(config: &str, root: &str, label: &str) -> PyResult<Self> {
        let cfg = ExperimentConfig::load(config).map_err(err)?;
        let entry = cfg
            .models
            .iter()
            .find(|e| e.label == label)
            .ok_or_else(|| PyValueError::new_err(format!("no model `{label}` in {}", cfg.name)))?;
        let paths = RunPaths::new(&cfg, Path::new(root));
        let mut bundle = load_model(&paths, label).map_err(err)?;
        let pipeline = eval_pipeline(&mut bundle, &entry.pipeline).map_err(err)?;
        Ok(Self {
            label: label.into(),
            pipeline,
        })
    }

    #[getter]
    fn label(&self) -> &str {
        &self.label
    }

    /// Feeds back `h_down` over the uplink `h_up` at `snr_db` and returns the
    /// base station's reconstruction.
    #[pyo3(signature = (h_down, h_up, snr_db, noise_seed=0))]
    fn reconstruct<'py>(
        &mut self,
        py: Python<'py>,
        h_down: PyReadonlyArray2<Complex64>,
        h_up: PyReadonlyArray2<Complex64>,
        snr_db: f64,
        noise_seed: u64,
    ) -> PyResult<Bound<'py, PyArray2<Complex64>>> {
        let pair = CsiSamplePair {
            h_down: matrix(&h_down)?,
            h_up: matrix(&h_up)?,
        };
        let link = Link {
            h_up: &pair.h_up,
            snr: snr(snr_db)?,
            noise_seed,
        };
        let out = self.pipeline.reconstruct(&[&pair], &[link]).map_err(err)?;
        Ok(array(py, &out[0]))
    }
}

/// Spatial-frequency CSI to the angular-delay domain.
#[pyfunction]
fn sf_to_ad<'py>(py: Python<'py>, h: PyReadonlyArray2<Complex64>) -> PyResult<Bound<'py, PyArray2<Complex64>>> {
    Ok(array(py, &transforms::sf_to_ad(&matrix(&h)?).values))
}

#[pyfunction]
fn ad_to_sf<'py>(py: Python<'py>, f: PyReadonlyArray2<Complex64>) -> PyResult<Bound<'py, PyArray2<Complex64>>> {
    let f = AngularDelayMatrix {
        values: matrix(&f)?,
        truncated: false,
    };
    Ok(array(py, &transforms::ad_to_sf(&f).map_err(err)?))
}

/// Keeps the first `n_trunc` delay rows.
#[pyfunction]
fn truncate<'py>(py: Python<'py>, f: PyReadonlyArray2<Complex64>, n_trunc: usize) -> PyResult<Bound<'py, PyArray2<Complex64>>> {
    let values = matrix(&f)?;
    let spec = TruncationSpec::new(n_trunc, values.rows(), values.cols()).map_err(err)?;
    let f = AngularDelayMatrix { values, truncated: false };
    Ok(array(py, &transforms::truncate(&f, &spec).map_err(err)?.values))
}

/// Pads truncated delay rows back to `n_sub` with zeros.
#[pyfunction]
fn zero_pad<'py>(py: Python<'py>, f: PyReadonlyArray2<Complex64>, n_sub: usize) -> PyResult<Bound<'py, PyArray2<Complex64>>> {
    let values = matrix(&f)?;
    let spec = TruncationSpec::new(values.rows(), n_sub, values.cols()).map_err(err)?;
    let f = AngularDelayMatrix { values, truncated: true };
    Ok(array(py, &transforms::zero_pad(&f, &spec).map_err(err)?.values))
}

#[pyfunction]
fn retained_energy_fraction(h: PyReadonlyArray2<Complex64>, n_trunc: usize) -> PyResult<f64> {
    Ok(transforms::retained_energy_fraction(&matrix(&h)?, n_trunc))
}

/// Scales symbols to total energy `k`.
#[pyfunction]
fn power_normalize<'py>(py: Python<'py>, s: PyReadonlyArray1<Complex64>) -> PyResult<Bound<'py, PyArray1<Complex64>>> {
    let s = phy::power_normalize(&FeedbackSymbols(s.as_slice()?.to_vec())).map_err(err)?;
    Ok(Array1::from(s.0).into_pyarray_bound(py))
}

#[pyfunction]
#[pyo3(signature = (s, snr_db, noise_seed=0))]
fn apply_awgn<'py>(
    py: Python<'py>,
    s: PyReadonlyArray1<Complex64>,
    snr_db: f64,
    noise_seed: u64,
) -> PyResult<Bound<'py, PyArray1<Complex64>>> {
    let y = phy::apply_awgn(&FeedbackSymbols(s.as_slice()?.to_vec()), snr(snr_db)?, noise_seed);
    Ok(Array1::from(y).into_pyarray_bound(py))
}

/// Per-subcarrier fading over the uplink antennas, then maximum-ratio
/// combining.
#[pyfunction]
#[pyo3(signature = (s, h_up, snr_db, noise_seed=0, equalize=false))]
fn apply_fading_mrc<'py>(
    py: Python<'py>,
    s: PyReadonlyArray1<Complex64>,
    h_up: PyReadonlyArray2<Complex64>,
    snr_db: f64,
    noise_seed: u64,
    equalize: bool,
) -> PyResult<Bound<'py, PyArray1<Complex64>>> {
    let cfg = ChannelConfig {
        equalize_mrc: equalize,
        ..ChannelConfig::default()
    };
    let s = FeedbackSymbols(s.as_slice()?.to_vec());
    let y = phy::apply_fading_mrc(&s, &matrix(&h_up)?, snr(snr_db)?, &cfg, noise_seed).map_err(err)?;
    Ok(Array1::from(y).into_pyarray_bound(py))
}

/// Codeword length the ideal separate scheme affords at `snr_db`.
#[pyfunction]
fn ideal_dimension(k: usize, snr_db: f64, bits: u32) -> PyResult<usize> {
    quant::ideal_dimension(k, snr(snr_db)?, bits).map_err(err)
}

/// Normalized mean squared error of one reconstruction, in dB.
#[pyfunction]
fn nmse(h: PyReadonlyArray2<Complex64>, h_hat: PyReadonlyArray2<Complex64>) -> PyResult<f64> {
    evaluation::nmse(&matrix(&h)?, &matrix(&h_hat)?).map_err(err)
}

/// Largest jump between neighbouring grid points of an NMSE curve, in dB.
#[pyfunction]
fn cliff_metric(snr_grid_db: Vec<f64>, nmse_db: Vec<f64>) -> PyResult<f64> {
    let r = SweepResult::new("curve", snr_grid_db, nmse_db).map_err(err)?;
    evaluation::cliff_metric(&r).map_err(err)
}

/// Channel scenario an experiment config (preset name or JSON file) runs on.
#[pyfunction]
fn experiment_scenario(config: &str) -> PyResult<PyScenario> {
    Ok(PyScenario(ExperimentConfig::load(config).map_err(err)?.scenario()))
}

#[pyfunction]
fn list_presets() -> Vec<&'static str> {
    experiments::list_presets()
}

/// Runs an experiment end to end under `root` and returns `results.json`.
#[pyfunction]
#[pyo3(signature = (config, root, seed=None))]
fn run_experiment(py: Python<'_>, config: &str, root: &str, seed: Option<u64>) -> PyResult<String> {
    let mut cfg = ExperimentConfig::load(config).map_err(err)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let paths = RunPaths::new(&cfg, Path::new(root));
    let results = py
        .allow_threads(|| experiments::run_experiment(&cfg, None, &paths))
        .map_err(err)?;
    results.to_json().map_err(err)
}

#[pymodule]
#[pyo3(name = "csi_djscc")]
pub fn bindings(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyQuantizer>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(sf_to_ad, m)?)?;
    m.add_function(wrap_pyfunction!(ad_to_sf, m)?)?;
    m.add_function(wrap_pyfunction!(truncate, m)?)?;
    m.add_function(wrap_pyfunction!(zero_pad, m)?)?;
    m.add_function(wrap_pyfunction!(retained_energy_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(power_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(apply_awgn, m)?)?;
    m.add_function(wrap_pyfunction!(apply_fading_mrc, m)?)?;
    m.add_function(wrap_pyfunction!(ideal_dimension, m)?)?;
    m.add_function(wrap_pyfunction!(nmse, m)?)?;
    m.add_function(wrap_pyfunction!(cliff_metric, m)?)?;
    m.add_function(wrap_pyfunction!(experiment_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(list_presets, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
