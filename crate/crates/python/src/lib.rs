//! Python bindings: geometry, encodings, metrics, synthetic data, models and
//! the pre-training / fine-tuning loops.
//!
//! Arrays cross the boundary as nested lists; run settings as JSON objects
//! overlaid on the mode's defaults.

use std::path::PathBuf;

use pyo3::exceptions::{PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde_json::Value;
use usat::checkpoint::{Checkpoint, RunInfo, Stage};
use usat::data::synth::{synth_generate, SynthConfig};
use usat::data::{Dataset, Store};
use usat::encodings::GroupIndexMode;
use usat::masking::{mask_rng, sample_masks, MaskPlan};
use usat::training::{self, RunConfig};
use usat::{BandKey, BandSubset, UsatError};

fn err(e: UsatError) -> PyErr {
    match e {
        UsatError::Io(_) | UsatError::NonFinite(_) | UsatError::Format(_) | UsatError::Json(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn rows(a: &ndarray::Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[pyfunction]
#[pyo3(signature = (pos, d, omega = usat::encodings::DEFAULT_OMEGA))]
fn sincos_1d(pos: f64, d: usize, omega: f64) -> PyResult<Vec<f64>> {
    usat::encodings::sincos_1d(pos, d, omega).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (row, col, pos_dim, omega = usat::encodings::DEFAULT_OMEGA))]
fn posenc_2d(row: f64, col: f64, pos_dim: usize, omega: f64) -> PyResult<Vec<f64>> {
    usat::encodings::posenc_2d(row, col, pos_dim, omega).map_err(err)
}

#[pyfunction]
fn fine_grid_offset(image_footprint_m: f64, max_footprint_m: f64, fine_patch_extent_m: f64) -> PyResult<f64> {
    usat::geometry::fine_grid_offset(image_footprint_m, max_footprint_m, fine_patch_extent_m).map_err(err)
}

#[pyfunction]
fn mask_count(p: usize, ratio: f64) -> PyResult<usize> {
    usat::masking::mask_count(p, ratio).map_err(err)
}

#[pyfunction]
fn average_precision(scores: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    usat::metrics::average_precision(&scores, &labels).map_err(err)
}

/// Sensor and spectral-group layout shared by data and models.
#[pyclass(name = "Geometry", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyGeometry(usat::GeometryConfig);

#[pymethods]
impl PyGeometry {
    #[staticmethod]
    fn usatlas() -> Self {
        Self(usat::GeometryConfig::usatlas())
    }

    #[staticmethod]
    fn desk() -> Self {
        Self(usat::GeometryConfig::desk())
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let g: usat::GeometryConfig = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        g.validate().map_err(err)?;
        Ok(Self(g))
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.0).expect("geometry serializes")
    }

    fn validate(&self) -> PyResult<()> {
        self.0.validate().map_err(err)
    }

    /// `(id, sensor, bands, gsd, patch_count, patch_size)` per group in token order.
    fn groups(&self) -> Vec<(usize, String, Vec<String>, f64, usize, usize)> {
        self.0
            .groups()
            .iter()
            .map(|g| {
                let sensor = self.0.sensor_by_id(g.sensor_id).map(|s| s.name.clone()).unwrap_or_default();
                (g.id, sensor, g.band_names.clone(), g.gsd, g.patch_count, g.patch_size)
            })
            .collect()
    }

    #[pyo3(signature = (sensors = None, bands = None))]
    fn sequence_length(&self, sensors: Option<Vec<String>>, bands: Option<Vec<String>>) -> PyResult<usize> {
        let subset = self.0.select(sensors.as_deref(), bands.as_deref()).map_err(err)?;
        usat::geometry::sequence_length(&self.0, &subset).map_err(err)
    }

    /// Cosine similarity of one patch encoding of `group_id` against the reference grid.
    #[pyo3(signature = (group_id, row, col, pos_dim, omega = usat::encodings::DEFAULT_OMEGA))]
    fn similarity_map(&self, group_id: usize, row: usize, col: usize, pos_dim: usize, omega: f64) -> PyResult<Vec<Vec<f64>>> {
        let g = self
            .0
            .group(group_id)
            .ok_or_else(|| PyValueError::new_err(format!("no spectral group {group_id}")))?;
        let map = usat::encodings::similarity_map(g, &self.0.footprint, pos_dim, omega, row, col).map_err(err)?;
        Ok(rows(&map))
    }
}

/// Samples in memory with class names and per-band statistics.
#[pyclass(name = "Dataset", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset(Dataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (geometry, n, seed = 0, n_classes = 6))]
    fn synth(geometry: &PyGeometry, n: usize, seed: u64, n_classes: usize) -> PyResult<Self> {
        let cfg = SynthConfig { n_classes, ..Default::default() };
        Ok(Self(synth_generate(seed, n, &geometry.0, &cfg).map_err(err)?.to_dataset()))
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self(Store::open(&dir).and_then(|s| s.load_dataset()).map_err(err)?))
    }

    /// Standardized with this dataset's own statistics.
    fn normalized(&self) -> Self {
        Self(self.0.normalized())
    }

    fn __len__(&self) -> usize {
        self.0.samples.len()
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.0.classes.clone()
    }

    fn sample_id(&self, i: usize) -> PyResult<String> {
        Ok(self.sample(i)?.id.clone())
    }

    fn labels(&self, i: usize) -> PyResult<Vec<f64>> {
        Ok(self.sample(i)?.labels.clone())
    }

    /// Qualified names (`sensor/band`) of the rasters in sample `i`.
    fn bands(&self, i: usize) -> PyResult<Vec<String>> {
        Ok(self.sample(i)?.rasters.keys().map(|k| k.to_string()).collect())
    }

    fn raster(&self, i: usize, sensor: &str, band: &str) -> PyResult<Vec<Vec<f64>>> {
        let r = self
            .sample(i)?
            .rasters
            .get(&BandKey::new(sensor, band))
            .ok_or_else(|| PyValueError::new_err(format!("no band {sensor}/{band}")))?;
        Ok(rows(&r.pixels))
    }
}

impl PyDataset {
    fn sample(&self, i: usize) -> PyResult<&usat::data::Sample> {
        self.0
            .samples
            .get(i)
            .ok_or_else(|| PyIndexError::new_err(format!("sample {i} of {}", self.0.samples.len())))
    }
}

fn parse_preset(name: &str) -> PyResult<usat::Preset> {
    match name {
        "tiny" => Ok(usat::Preset::Tiny),
        "vitl" => Ok(usat::Preset::Vitl),
        other => Err(PyValueError::new_err(format!("unknown preset {other:?}; expected tiny or vitl"))),
    }
}

fn parse_mode(name: &str) -> PyResult<GroupIndexMode> {
    match name {
        "pretrain" => Ok(GroupIndexMode::Pretrain),
        "finetune" => Ok(GroupIndexMode::Finetune),
        other => Err(PyValueError::new_err(format!("unknown index mode {other:?}"))),
    }
}

#[pyclass(name = "Model", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModel(usat::Model);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (geometry, preset = "tiny", n_classes = 6, seed = 0))]
    fn new(geometry: &PyGeometry, preset: &str, n_classes: usize, seed: u64) -> PyResult<Self> {
        let cfg = usat::ModelConfig::preset(parse_preset(preset)?, n_classes);
        Ok(Self(usat::Model::new(cfg, geometry.0.clone(), seed).map_err(err)?))
    }

    /// Model of a checkpoint directory.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self(Checkpoint::load(&dir).map_err(err)?.model))
    }

    /// Writes a checkpoint recording `dataset`'s classes and statistics;
    /// `dataset` should be the un-normalized data the model was trained on.
    fn save(&self, dir: PathBuf, dataset: &PyDataset) -> PyResult<()> {
        Checkpoint {
            model: self.0.clone(),
            norm_stats: dataset.0.norm_stats.clone(),
            classes: dataset.0.classes.clone(),
            run: RunInfo {
                stage: Stage::Init,
                bands: self.0.geometry.all_bands().keys().to_vec(),
                group_index_mode: GroupIndexMode::Pretrain,
                steps: 0,
                seed: 0,
            },
        }
        .save(&dir)
        .map_err(err)
    }

    #[getter]
    fn geometry(&self) -> PyGeometry {
        PyGeometry(self.0.geometry.clone())
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.0.params.num_scalars()
    }

    fn param_names(&self) -> Vec<String> {
        self.0.params.names().cloned().collect()
    }

    fn param(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let t = self.0.params.get(name).map_err(err)?;
        Ok((t.shape().to_vec(), t.iter().copied().collect()))
    }

    /// Classifier logits for sample `i` over the selected bands.
    #[pyo3(signature = (dataset, i, sensors = None, bands = None, mode = "finetune"))]
    fn logits(&self, dataset: &PyDataset, i: usize, sensors: Option<Vec<String>>, bands: Option<Vec<String>>, mode: &str) -> PyResult<Vec<f64>> {
        let subset = self.subset(sensors, bands)?;
        let enc = self.0.encodings(&subset, parse_mode(mode)?).map_err(err)?;
        let out = self.0.predict_logits(dataset.sample(i)?, &subset, &enc).map_err(err)?;
        Ok(out.to_vec())
    }

    /// Mean-pooled encoder output for sample `i`.
    #[pyo3(signature = (dataset, i, sensors = None, bands = None, mode = "finetune"))]
    fn features(&self, dataset: &PyDataset, i: usize, sensors: Option<Vec<String>>, bands: Option<Vec<String>>, mode: &str) -> PyResult<Vec<f64>> {
        let subset = self.subset(sensors, bands)?;
        let enc = self.0.encodings(&subset, parse_mode(mode)?).map_err(err)?;
        Ok(self.0.features(dataset.sample(i)?, &subset, &enc).map_err(err)?.to_vec())
    }

    /// Masked reconstruction loss of sample `i` under masks drawn from `seed`.
    #[pyo3(signature = (dataset, i, ratio = 0.75, seed = 0))]
    fn mae_loss(&self, dataset: &PyDataset, i: usize, ratio: f64, seed: u64) -> PyResult<f64> {
        let subset = self.0.geometry.all_bands();
        let enc = self.0.encodings(&subset, GroupIndexMode::Pretrain).map_err(err)?;
        let plan = MaskPlan::new(&self.0.geometry, &subset, ratio, seed).map_err(err)?;
        let masks = sample_masks(&plan, &self.0.geometry, &mut mask_rng(seed)).map_err(err)?;
        self.0
            .mae_step(dataset.sample(i)?, &subset, &enc, &masks, None)
            .map_err(err)
    }
}

impl PyModel {
    fn subset(&self, sensors: Option<Vec<String>>, bands: Option<Vec<String>>) -> PyResult<BandSubset> {
        self.0.geometry.select(sensors.as_deref(), bands.as_deref()).map_err(err)
    }
}

fn run_config(defaults: RunConfig, overrides: Option<&str>) -> PyResult<RunConfig> {
    let mut value = serde_json::to_value(defaults).expect("run config serializes");
    if let Some(text) = overrides {
        let extra: Value = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let Value::Object(extra) = extra else {
            return Err(PyValueError::new_err("run settings must be a JSON object"));
        };
        value.as_object_mut().expect("object").extend(extra);
    }
    let run: RunConfig = serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    run.validate().map_err(err)?;
    Ok(run)
}

/// Masked-autoencoder pre-training on a normalized dataset.
/// Returns the trained model and `(step, lr, loss)` per optimizer step.
#[pyfunction]
#[pyo3(signature = (model, dataset, run_json = None))]
fn pretrain(model: &PyModel, dataset: &PyDataset, run_json: Option<&str>) -> PyResult<(PyModel, Vec<(usize, f64, f64)>)> {
    let run = run_config(RunConfig::pretrain(), run_json)?;
    let out = training::pretrain(model.0.clone(), &dataset.0, &run, |_| {}).map_err(err)?;
    if let Some(reason) = out.aborted {
        return Err(PyRuntimeError::new_err(reason));
    }
    let log = out.log.iter().map(|s| (s.step, s.lr, s.loss)).collect();
    Ok((PyModel(out.model), log))
}

/// Fine-tuning (or a linear probe) of `fresh`, starting from `source`'s
/// encoder when given. Returns the best model, its epoch and metric.
#[pyfunction]
#[pyo3(signature = (source, fresh, dataset, run_json = None))]
fn finetune(source: Option<&PyModel>, fresh: &PyModel, dataset: &PyDataset, run_json: Option<&str>) -> PyResult<(PyModel, usize, f64)> {
    let run = run_config(RunConfig::finetune(), run_json)?;
    let out = training::finetune(source.map(|m| &m.0), fresh.0.clone(), &dataset.0, &run, |_| {}).map_err(err)?;
    Ok((PyModel(out.model), out.best_epoch, out.best_metric))
}

/// Micro/macro AP (and accuracy for single-label data) over every sample.
#[pyfunction]
#[pyo3(signature = (model, dataset, sensors = None, bands = None, mode = "finetune"))]
fn evaluate<'py>(
    py: Python<'py>,
    model: &PyModel,
    dataset: &PyDataset,
    sensors: Option<Vec<String>>,
    bands: Option<Vec<String>>,
    mode: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let subset = model.subset(sensors, bands)?;
    let samples: Vec<_> = dataset.0.samples.iter().collect();
    let m = training::evaluate(&model.0, &samples, &subset, parse_mode(mode)?).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("micro_ap", m.micro_ap)?;
    d.set_item("macro_ap", m.macro_ap)?;
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("n_samples", m.n_samples)?;
    d.set_item("per_class_ap", m.per_class_ap)?;
    Ok(d)
}

#[pymodule]
fn usat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGeometry>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(sincos_1d, m)?)?;
    m.add_function(wrap_pyfunction!(posenc_2d, m)?)?;
    m.add_function(wrap_pyfunction!(fine_grid_offset, m)?)?;
    m.add_function(wrap_pyfunction!(mask_count, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
