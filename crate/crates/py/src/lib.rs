//! Python bindings. Images cross the boundary as nested `[channel][row][col]`
//! lists of floats in [-1, 1].

use std::collections::BTreeMap;
use std::path::PathBuf;

use angiogan::blocks::{count_parameters, BlockVariant, ResidualBlockConfig};
use angiogan::checkpoint;
use angiogan::discriminators::{DiscriminatorId, DiscriminatorSetConfig};
use angiogan::evaluation::{self, EmbeddingStats, Label};
use angiogan::objective::ObjectiveConfig;
use angiogan::perturb::{apply_perturbation, PerturbationKind, PerturbationSpec};
use angiogan::trainer::{ModelConfig, TrainingSchedule, TrainingState};
use angiogan::{Error, ImageTensor};
use nalgebra::{DMatrix, DVector};
use ndarray::Array3;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

type Nested = Vec<Vec<Vec<f64>>>;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Divergence { .. } | Error::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn image_from(nested: Nested) -> PyResult<ImageTensor> {
    let c = nested.len();
    let h = nested.first().map_or(0, Vec::len);
    let w = nested.first().and_then(|p| p.first()).map_or(0, Vec::len);
    if c == 0 || h == 0 || w == 0 {
        return Err(PyValueError::new_err("image must be a non-empty [channel][row][col] list"));
    }
    if nested.iter().any(|p| p.len() != h || p.iter().any(|r| r.len() != w)) {
        return Err(PyValueError::new_err("image rows are ragged"));
    }
    Ok(ImageTensor::new(Array3::from_shape_fn((c, h, w), |(k, y, x)| nested[k][y][x])))
}

fn image_to(img: &ImageTensor) -> Nested {
    img.data()
        .outer_iter()
        .map(|plane| plane.outer_iter().map(|row| row.to_vec()).collect())
        .collect()
}

fn variant(name: &str) -> PyResult<BlockVariant> {
    match name {
        "proposed" => Ok(BlockVariant::Proposed),
        "original" => Ok(BlockVariant::Original),
        other => Err(PyValueError::new_err(format!("unknown block variant '{other}'"))),
    }
}

/// Trainable parameter count of one residual block.
#[pyfunction]
#[pyo3(signature = (variant_name, channels = 32, kernel = 3))]
fn block_parameters(variant_name: &str, channels: usize, kernel: usize) -> PyResult<usize> {
    Ok(count_parameters(&ResidualBlockConfig::new(variant(variant_name)?, channels, kernel)).total)
}

/// `(name, input side, patch side)` for the four discriminators.
#[pyfunction]
#[pyo3(signature = (base = 512, base_channels = 64))]
fn patch_table(base: usize, base_channels: usize) -> Vec<(String, usize, usize)> {
    let set = DiscriminatorSetConfig::new(base, base_channels);
    DiscriminatorId::ALL
        .iter()
        .map(|id| {
            let c = set.config_for(*id);
            (id.to_string(), c.input_size, c.patch_output_size())
        })
        .collect()
}

#[pyfunction]
#[pyo3(signature = (image, kind, amount = None, radius_fraction = 1.0, seed = 0))]
fn perturb(image: Nested, kind: &str, amount: Option<f64>, radius_fraction: f64, seed: u64) -> PyResult<Nested> {
    let kind: PerturbationKind = kind.parse().map_err(to_py)?;
    let mut spec = PerturbationSpec { radius_fraction, seed, ..PerturbationSpec::new(kind) };
    if let Some(a) = amount {
        spec.amount = a;
    }
    let out = apply_perturbation(&image_from(image)?, &spec).map_err(to_py)?;
    Ok(image_to(&out))
}

fn stats(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> PyResult<EmbeddingStats> {
    let d = mean.len();
    if cov.len() != d || cov.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err(format!("covariance must be {d}x{d}")));
    }
    Ok(EmbeddingStats {
        mean: DVector::from_vec(mean),
        covariance: DMatrix::from_fn(d, d, |i, j| cov[i][j]),
        count: 0,
    })
}

/// Fréchet distance between two Gaussians given by mean and covariance.
#[pyfunction]
fn frechet_distance(mean_a: Vec<f64>, cov_a: Vec<Vec<f64>>, mean_b: Vec<f64>, cov_b: Vec<Vec<f64>>) -> PyResult<f64> {
    evaluation::frechet_distance(&stats(mean_a, cov_a)?, &stats(mean_b, cov_b)?).map_err(to_py)
}

/// Fréchet distance between two sets of embedding rows.
#[pyfunction]
fn frechet_from_embeddings(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let a = EmbeddingStats::from_embeddings(a).map_err(to_py)?;
    let b = EmbeddingStats::from_embeddings(b).map_err(to_py)?;
    evaluation::frechet_distance(&a, &b).map_err(to_py)
}

fn labels(map: BTreeMap<String, String>) -> PyResult<BTreeMap<String, Label>> {
    map.into_iter()
        .map(|(k, v)| Ok((k, v.parse::<Label>().map_err(to_py)?)))
        .collect()
}

/// Scores one rater's `{item: "real"|"fake"}` answers against the key.
#[pyfunction]
fn score_study(key: BTreeMap<String, String>, responses: BTreeMap<String, String>) -> PyResult<BTreeMap<String, f64>> {
    let r = evaluation::score_study(&labels(responses)?, &labels(key)?).map_err(to_py)?;
    Ok(BTreeMap::from([
        ("fake_correct".to_string(), r.fake_correct_rate),
        ("real_correct".to_string(), r.real_correct_rate),
        ("missed".to_string(), r.missed),
        ("found".to_string(), r.found),
        ("confusion".to_string(), r.confusion),
    ]))
}

/// A generator pyramid with its discriminators and optimizer state.
#[pyclass(unsendable)]
struct Model {
    state: TrainingState,
    schedule: TrainingSchedule,
    objective: ObjectiveConfig,
}

#[pymethods]
impl Model {
    /// Fresh weights; `size` is "full" or "toy".
    #[new]
    #[pyo3(signature = (size = "toy", seed = 0))]
    fn new(size: &str, seed: u64) -> PyResult<Self> {
        let model = match size {
            "full" => ModelConfig::full(),
            "toy" => ModelConfig::toy(),
            other => return Err(PyValueError::new_err(format!("unknown model size '{other}'"))),
        };
        let schedule = TrainingSchedule { seed, ..TrainingSchedule::default() };
        let state = TrainingState::new(model, schedule.adam(), seed).map_err(to_py)?;
        Ok(Model { state, schedule, objective: ObjectiveConfig::default() })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = checkpoint::load(&path).map_err(to_py)?;
        Ok(Model { state: ck.state, schedule: ck.schedule, objective: ck.objective })
    }

    fn save(&mut self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &mut self.state, &self.schedule, &self.objective).map_err(to_py)
    }

    #[getter]
    fn crop_size(&self) -> usize {
        self.state.model.crop_size
    }

    #[getter]
    fn cycle(&self) -> u64 {
        self.state.cycle
    }

    /// Translates a 3×S×S fundus crop into a 1×S×S angiogram.
    fn translate(&mut self, fundus: Nested) -> PyResult<Nested> {
        let out = self.state.infer(&image_from(fundus)?).map_err(to_py)?;
        Ok(image_to(&out))
    }
}

/// Runs the command-line interface in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    angiogan::cli::run(std::iter::once("angiogan".to_string()).chain(args))
}

#[pymodule]
#[pyo3(name = "angiogan")]
fn angiogan_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(block_parameters, m)?)?;
    m.add_function(wrap_pyfunction!(patch_table, m)?)?;
    m.add_function(wrap_pyfunction!(perturb, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_from_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(score_study, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
