//! Python bindings: tensors and the core ops, model configuration and
//! inference, datasets, checkpoints, metrics and the command line.

use clap::Parser;
use hsi_gsf::autodiff::Tape;
use hsi_gsf::checkpoint::Checkpoint;
use hsi_gsf::data::{load_cube, HsiCube, LabelMap};
use hsi_gsf::gsf::{gsf_forward, GsfParams};
use hsi_gsf::metrics::{metrics_from_confusion, ConfusionMatrix};
use hsi_gsf::model::{forward, init_params, model_forward, ModelConfig, ModelParams};
use hsi_gsf::{Error, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFinite { .. } | Error::Tape(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Dense row-major float64 tensor.
#[pyclass(name = "Tensor", module = "hsigsf", skip_from_py_object)]
#[derive(Clone)]
struct PyTensor(Tensor<f64>);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Self> {
        Tensor::new(shape, data).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self(Tensor::zeros(shape))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn numel(&self) -> usize {
        self.0.numel()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        self.0.clone().reshape(shape).map(Self).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.shape().first().copied().unwrap_or(1)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

/// Cross-correlation of `[C, T, H, W]` input with `[O, C, kt, kh, kw]`
/// kernels, stride 1, zero padding `padding` per axis.
#[pyfunction]
#[pyo3(signature = (x, kernel, bias, padding = (0, 0, 0)))]
fn conv3d(
    x: PyRef<'_, PyTensor>,
    kernel: PyRef<'_, PyTensor>,
    bias: PyRef<'_, PyTensor>,
    padding: (usize, usize, usize),
) -> PyResult<PyTensor> {
    let tape = Tape::new();
    let y = tape
        .constant(&x.0)
        .conv3d(
            tape.constant(&kernel.0),
            tape.constant(&bias.0),
            [padding.0, padding.1, padding.2],
        )
        .map_err(py_err)?;
    Ok(PyTensor(y.to_tensor()))
}

/// Cross-correlation of `[C, H, W]` input with `[O, C, kh, kw]` kernels.
#[pyfunction]
#[pyo3(signature = (x, kernel, bias, padding = (0, 0)))]
fn conv2d(
    x: PyRef<'_, PyTensor>,
    kernel: PyRef<'_, PyTensor>,
    bias: PyRef<'_, PyTensor>,
    padding: (usize, usize),
) -> PyResult<PyTensor> {
    let tape = Tape::new();
    let y = tape
        .constant(&x.0)
        .conv2d(
            tape.constant(&kernel.0),
            tape.constant(&bias.0),
            [padding.0, padding.1],
        )
        .map_err(py_err)?;
    Ok(PyTensor(y.to_tensor()))
}

#[pyfunction]
fn softmax(x: PyRef<'_, PyTensor>, axis: usize) -> PyResult<PyTensor> {
    let tape = Tape::new();
    let y = tape.constant(&x.0).softmax(axis).map_err(py_err)?;
    Ok(PyTensor(y.to_tensor()))
}

/// Gate-shift-fuse over a `[C, T, H, W]` volume. `params` maps
/// `gate.{0,1}.{kernel,bias}` and `fuse.{0,1}.{kernel,bias}` to tensors;
/// missing entries are zero.
#[pyfunction]
#[pyo3(signature = (x, params = None))]
fn gsf(x: PyRef<'_, PyTensor>, params: Option<&Bound<'_, PyDict>>) -> PyResult<PyTensor> {
    let channels = x.0.shape().first().copied().unwrap_or(0);
    let mut p = GsfParams::<Tensor<f64>>::zeros(channels);
    if let Some(d) = params {
        for (key, value) in d.iter() {
            let key: String = key.extract()?;
            let t = value.cast::<PyTensor>()?.borrow().0.clone();
            let mut found = false;
            p.visit_mut_named(|name, slot| {
                if name == key {
                    *slot = t.clone();
                    found = true;
                }
            });
            if !found {
                return Err(PyValueError::new_err(format!(
                    "unknown GSF parameter {key:?}"
                )));
            }
        }
    }
    let tape = Tape::new();
    let bound = p.bind_constants(&tape);
    let y = gsf_forward(tape.constant(&x.0), &bound).map_err(py_err)?;
    Ok(PyTensor(y.to_tensor()))
}

trait GsfExt {
    fn visit_mut_named(&mut self, f: impl FnMut(&str, &mut Tensor<f64>));
    fn bind_constants<'t>(self, tape: &'t Tape<f64>) -> GsfParams<hsi_gsf::autodiff::Var<'t, f64>>;
}

impl GsfExt for GsfParams<Tensor<f64>> {
    fn visit_mut_named(&mut self, mut f: impl FnMut(&str, &mut Tensor<f64>)) {
        for (g, conv) in self.gate.iter_mut().enumerate() {
            f(&format!("gate.{g}.kernel"), &mut conv.kernel);
            f(&format!("gate.{g}.bias"), &mut conv.bias);
        }
        for (g, conv) in self.fuse.iter_mut().enumerate() {
            f(&format!("fuse.{g}.kernel"), &mut conv.kernel);
            f(&format!("fuse.{g}.bias"), &mut conv.bias);
        }
    }

    fn bind_constants<'t>(self, tape: &'t Tape<f64>) -> GsfParams<hsi_gsf::autodiff::Var<'t, f64>> {
        let c = |c: &hsi_gsf::model::Conv<Tensor<f64>>| hsi_gsf::model::Conv {
            kernel: tape.constant(&c.kernel),
            bias: tape.constant(&c.bias),
        };
        GsfParams {
            gate: [c(&self.gate[0]), c(&self.gate[1])],
            fuse: [c(&self.fuse[0]), c(&self.fuse[1])],
        }
    }
}

/// OA, AA and kappa x 100 of a row-major `classes x classes` confusion
/// matrix (rows are truth).
#[pyfunction]
fn metrics<'py>(py: Python<'py>, counts: Vec<u64>, classes: usize) -> PyResult<Bound<'py, PyDict>> {
    let m = ConfusionMatrix::from_counts(classes, counts).map_err(py_err)?;
    let r = metrics_from_confusion(&m).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("oa", r.oa)?;
    d.set_item("aa", r.aa)?;
    d.set_item("kappa_x100", r.kappa_x100)?;
    d.set_item("per_class", r.per_class)?;
    Ok(d)
}

#[pyclass(name = "ModelConfig", module = "hsigsf", from_py_object)]
#[derive(Clone)]
struct PyModelConfig(ModelConfig);

#[pymethods]
impl PyModelConfig {
    /// The default architecture (13x13 patches of 30 components).
    #[new]
    fn new(num_classes: usize) -> Self {
        Self(ModelConfig::standard(num_classes))
    }

    #[staticmethod]
    fn tiny(num_classes: usize) -> Self {
        Self(ModelConfig::tiny(num_classes))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let c: ModelConfig =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        c.validate().map_err(py_err)?;
        Ok(Self(c))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("config serializes")
    }

    fn validate(&self) -> PyResult<()> {
        self.0.validate().map_err(py_err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes
    }

    #[getter]
    fn patch_size(&self) -> usize {
        self.0.patch_size
    }

    #[getter]
    fn pca_bands(&self) -> usize {
        self.0.pca_bands
    }

    #[getter]
    fn tokens(&self) -> usize {
        self.0.tokens
    }

    #[getter]
    fn heads(&self) -> usize {
        self.0.heads
    }

    #[setter]
    fn set_heads(&mut self, v: usize) {
        self.0.heads = v;
    }

    #[getter]
    fn gsf_enabled(&self) -> bool {
        self.0.gsf_enabled
    }

    #[setter]
    fn set_gsf_enabled(&mut self, v: bool) {
        self.0.gsf_enabled = v;
    }

    #[getter]
    fn te_enabled(&self) -> bool {
        self.0.te_enabled
    }

    #[setter]
    fn set_te_enabled(&mut self, v: bool) {
        self.0.te_enabled = v;
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig({})", self.to_json())
    }
}

/// Model parameters plus their configuration.
#[pyclass(name = "Model", module = "hsigsf")]
struct PyModel {
    config: ModelConfig,
    params: ModelParams<Tensor<f64>>,
}

impl PyModel {
    fn patches(&self, patches: Vec<Vec<f64>>) -> PyResult<Vec<Tensor<f64>>> {
        let s = self.config.patch_size;
        patches
            .into_iter()
            .map(|p| Tensor::new(vec![self.config.pca_bands, s, s], p).map_err(py_err))
            .collect()
    }
}

#[pymethods]
impl PyModel {
    /// Freshly initialised parameters.
    #[new]
    #[pyo3(signature = (config, seed = 42))]
    fn new(config: PyModelConfig, seed: u64) -> PyResult<Self> {
        let params = init_params::<f64>(&config.0, seed).map_err(py_err)?;
        Ok(Self {
            config: config.0,
            params,
        })
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig(self.config.clone())
    }

    fn param_names(&self) -> Vec<String> {
        self.params.names()
    }

    fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Class probabilities for band-major patches of `pca_bands * s * s`
    /// values each.
    fn predict_proba(&self, patches: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        model_forward(&self.patches(patches)?, &self.params, &self.config).map_err(py_err)
    }

    /// 1-based class labels.
    fn predict(&self, patches: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        Ok(self
            .predict_proba(patches)?
            .iter()
            .map(|p| hsi_gsf::model::argmax(p) + 1)
            .collect())
    }

    /// Shapes of the input and every intermediate stage for one patch.
    fn stage_shapes(&self, patch: Vec<f64>) -> PyResult<Vec<Vec<usize>>> {
        let x = self.patches(vec![patch])?.remove(0);
        let tape = Tape::new();
        let t = forward(
            tape.constant(&x),
            &self.params.bind(&tape, false),
            &self.config,
        )
        .map_err(py_err)?;
        let mut out = vec![x.shape().to_vec()];
        for v in [
            t.conv3d,
            Some(t.merged),
            t.conv2d,
            Some(t.features),
            t.grouping,
            t.tokens,
            t.encoder_in,
            Some(t.logits),
        ]
        .into_iter()
        .flatten()
        {
            out.push(v.shape());
        }
        Ok(out)
    }
}

#[pyclass(name = "Dataset", module = "hsigsf")]
struct PyDataset {
    cube: HsiCube,
    labels: LabelMap,
}

#[pymethods]
impl PyDataset {
    /// Loads a dataset from its JSON header.
    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        let (cube, labels) = load_cube(path).map_err(py_err)?;
        Ok(Self { cube, labels })
    }

    #[getter]
    fn width(&self) -> usize {
        self.cube.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.cube.height()
    }

    #[getter]
    fn bands(&self) -> usize {
        self.cube.bands()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.labels.num_classes()
    }

    fn class_counts(&self) -> Vec<usize> {
        self.labels.class_counts()
    }

    fn labels(&self) -> Vec<u16> {
        self.labels.labels().to_vec()
    }

    fn spectrum(&self, row: usize, col: usize) -> PyResult<Vec<f32>> {
        if row >= self.cube.height() || col >= self.cube.width() {
            return Err(PyValueError::new_err(format!(
                "pixel ({row}, {col}) is outside the image"
            )));
        }
        Ok(self.cube.spectrum(row, col))
    }
}

#[pyclass(name = "Checkpoint", module = "hsigsf")]
struct PyCheckpoint(Checkpoint);

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        Checkpoint::load(path).map(Self).map_err(py_err)
    }

    fn tensor_names(&self) -> Vec<String> {
        self.0.tensor_names()
    }

    fn config_json(&self) -> PyResult<String> {
        self.0.config.canonical_json().map_err(py_err)
    }

    fn config_hash(&self) -> PyResult<String> {
        self.0.config.config_hash().map_err(py_err)
    }

    /// The stored parameters as a model (PCA is not applied by `predict`).
    fn model(&self) -> PyModel {
        PyModel {
            config: self.0.config.model.clone(),
            params: self.0.params.cast::<f64>(),
        }
    }
}

/// Runs the command line with `args` (without the program name) and
/// returns `(success, stdout)`.
#[pyfunction]
fn run(args: Vec<String>) -> PyResult<(bool, String)> {
    let cli = hsi_gsf::cli::Cli::try_parse_from(std::iter::once("hsigsf".to_string()).chain(args))
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let mut out = Vec::new();
    let ok = hsi_gsf::cli::run(cli, &mut out, &mut std::io::sink()).map_err(py_err)?;
    Ok((ok, String::from_utf8_lossy(&out).into_owned()))
}

/// Finite-difference gradient check; returns `(passed, max_error)`.
#[pyfunction]
#[pyo3(signature = (tiny = true, seed = 1))]
fn gradcheck(tiny: bool, seed: u64) -> PyResult<(bool, f64)> {
    use hsi_gsf::cli::{cmd_gradcheck, ConfigPreset, GradcheckArgs};
    let args = GradcheckArgs {
        config: if tiny {
            ConfigPreset::Tiny
        } else {
            ConfigPreset::Default
        },
        seed,
        max_coords: None,
        corrupt_backward: false,
    };
    let report = cmd_gradcheck(&args, &mut std::io::sink()).map_err(py_err)?;
    Ok((report.passed(), report.max_error()))
}

#[pymodule]
fn hsigsf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(conv3d, m)?)?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(gsf, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
