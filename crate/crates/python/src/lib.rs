//! Python bindings: `import techdetect_py`.

use std::path::PathBuf;

use numpy::{PyArray1, PyArray2, PyArrayMethods, PyReadonlyArray1, PyReadonlyArray2};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use techdetect::detector::{detect_variable_with_hop, frame_labels_to_events, DEFAULT_HOP_SECONDS};
use techdetect::model::checkpoint::{load_checkpoint, save_checkpoint};
use techdetect::model::{forward, train_from_manifests};
use techdetect::synth::{load_clip_library, segment_rng};
use techdetect::{
    Detector, Error, EventAnnotation, FcnConfig, FcnParameters, FeatureExtractor, FramePrediction,
    Matrix, MelSpectrogram, TechniqueVocabulary, FRAME_SECONDS,
};

create_exception!(techdetect_py, TechdetectError, PyException, "Error raised by the techdetect toolkit.");
create_exception!(
    techdetect_py,
    NumericalError,
    TechdetectError,
    "Non-finite values or training divergence."
);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::NonFinite(_) | Error::Divergence { .. } => NumericalError::new_err(e.to_string()),
        _ => TechdetectError::new_err(e.to_string()),
    }
}

trait IntoPyResult<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPyResult<T> for techdetect::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn matrix_to_numpy<'py>(py: Python<'py>, m: &Matrix) -> PyResult<Bound<'py, PyArray2<f64>>> {
    PyArray1::from_slice(py, m.as_slice()).reshape([m.rows(), m.cols()])
}

fn numpy_to_matrix(a: &PyReadonlyArray2<'_, f64>) -> PyResult<Matrix> {
    let view = a.as_array();
    let (rows, cols) = view.dim();
    Matrix::new(rows, cols, view.iter().copied().collect()).py()
}

fn events_to_list(a: &EventAnnotation, vocab: Option<&TechniqueVocabulary>) -> EventList {
    a.events()
        .iter()
        .map(|e| {
            let label = match vocab.and_then(|v| v.label(e.label)) {
                Some(name) => PyLabel::Name(name.to_owned()),
                None => PyLabel::Index(e.label),
            };
            (e.onset, e.offset, label)
        })
        .collect()
}

type EventList = Vec<(f64, f64, PyLabel)>;

#[derive(IntoPyObject)]
enum PyLabel {
    Name(String),
    Index(usize),
}

/// Mono 44.1 kHz audio with samples in [-1, 1].
#[pyclass(name = "AudioClip", module = "techdetect_py", skip_from_py_object)]
#[derive(Clone)]
struct PyAudioClip(techdetect::AudioClip);

#[pymethods]
impl PyAudioClip {
    #[new]
    #[pyo3(signature = (samples, sample_rate = techdetect::SAMPLE_RATE))]
    fn new(samples: PyReadonlyArray1<'_, f32>, sample_rate: u32) -> PyResult<Self> {
        let samples = samples.as_array().iter().copied().collect();
        Ok(Self(techdetect::AudioClip::new(samples, sample_rate).py()?))
    }

    #[staticmethod]
    fn silence(num_samples: usize) -> Self {
        Self(techdetect::AudioClip::silence(num_samples))
    }

    #[getter]
    fn samples<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray1<f32>> {
        PyArray1::from_slice(py, self.0.samples())
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.0.sample_rate()
    }

    #[getter]
    fn duration(&self) -> f64 {
        self.0.duration()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("AudioClip({} samples, {:.3} s)", self.0.len(), self.0.duration())
    }
}

/// Ordered technique labels with a designated "other" class.
#[pyclass(name = "Vocabulary", module = "techdetect_py", skip_from_py_object)]
#[derive(Clone)]
struct PyVocabulary(TechniqueVocabulary);

#[pymethods]
impl PyVocabulary {
    #[new]
    fn new(labels: Vec<String>) -> PyResult<Self> {
        Ok(Self(TechniqueVocabulary::from_labels(labels).py()?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(TechniqueVocabulary::load(path).py()?))
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.0.labels().to_vec()
    }

    #[getter]
    fn other_index(&self) -> usize {
        self.0.other_index()
    }

    fn index_of(&self, label: &str) -> PyResult<usize> {
        self.0.index_of(label).py()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Vocabulary({:?})", self.0.labels())
    }
}

/// Trained (or freshly initialized) frame classifier with its normalization statistics.
#[pyclass(name = "FcnModel", module = "techdetect_py")]
struct PyFcnModel {
    detector: Detector,
}

impl PyFcnModel {
    fn wrap(params: FcnParameters) -> PyResult<Self> {
        Ok(Self {
            detector: Detector::new(params).py()?,
        })
    }

    fn params(&self) -> &FcnParameters {
        self.detector.params()
    }
}

#[pymethods]
impl PyFcnModel {
    /// Reference architecture for `k` classes with seeded weights.
    #[new]
    #[pyo3(signature = (k, seed = 0))]
    fn new(k: usize, seed: u64) -> PyResult<Self> {
        Self::wrap(FcnParameters::init(&FcnConfig::reference(k), seed).py()?)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Self::wrap(load_checkpoint(path).py()?)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(self.params(), path).py()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.params().config().k
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.params().num_params()
    }

    #[getter]
    fn input_shape(&self) -> (usize, usize) {
        let c = self.params().config();
        (c.n_mels, c.n_frames)
    }

    #[getter]
    fn vocabulary(&self) -> Option<PyVocabulary> {
        self.params().vocabulary.clone().map(PyVocabulary)
    }

    /// Flat parameter vector in layout order.
    #[getter]
    fn parameters<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray1<f64>> {
        PyArray1::from_slice(py, self.params().values())
    }

    /// Architecture and training settings as a dict.
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = self.params().config();
        let d = PyDict::new(py);
        d.set_item("k", c.k)?;
        d.set_item("n_mels", c.n_mels)?;
        d.set_item("n_frames", c.n_frames)?;
        d.set_item("widths", c.widths.to_vec())?;
        d.set_item("deconv_kernel", c.deconv_kernel)?;
        d.set_item("deconv_stride", c.deconv_stride)?;
        d.set_item("learning_rate", c.learning_rate)?;
        d.set_item("epochs", c.epochs)?;
        d.set_item("batch_size", c.batch_size)?;
        d.set_item("seed", c.seed)?;
        Ok(d)
    }

    /// Class probabilities (k x n_frames) for an already-normalized log-mel input.
    fn forward<'py>(&self, py: Python<'py>, mel: PyReadonlyArray2<'_, f64>) -> PyResult<Bound<'py, PyArray2<f64>>> {
        let mel = MelSpectrogram::new(numpy_to_matrix(&mel)?).py()?;
        let params = self.params();
        let pred = py.detach(|| forward(params, &mel)).py()?;
        matrix_to_numpy(py, pred.probs())
    }

    /// Sliding-window class probabilities (k x n_frames) for audio of any length.
    #[pyo3(signature = (clip, hop = DEFAULT_HOP_SECONDS))]
    fn detect<'py>(&self, py: Python<'py>, clip: &PyAudioClip, hop: f64) -> PyResult<Bound<'py, PyArray2<f64>>> {
        let pred = py.detach(|| detect_variable_with_hop(&self.detector, &clip.0, hop)).py()?;
        matrix_to_numpy(py, pred.probs())
    }

    /// Detected events as `(onset, offset, label)` tuples.
    #[pyo3(signature = (clip, hop = DEFAULT_HOP_SECONDS))]
    fn detect_events(&self, py: Python<'_>, clip: &PyAudioClip, hop: f64) -> PyResult<EventList> {
        let pred = py.detach(|| detect_variable_with_hop(&self.detector, &clip.0, hop)).py()?;
        let events = techdetect::decode_events(&pred);
        Ok(events_to_list(&events, self.params().vocabulary.as_ref()))
    }

    /// Frame accuracy report over a synthesized dataset, as a dict.
    fn evaluate<'py>(&self, py: Python<'py>, manifest: PathBuf) -> PyResult<Bound<'py, PyDict>> {
        let m = techdetect::DatasetManifest::load(manifest).py()?;
        let report = py.detach(|| techdetect::evaluate_dataset(&self.detector, &m)).py()?;
        let d = PyDict::new(py);
        d.set_item("average_accuracy", report.average_accuracy)?;
        d.set_item("total_frames", report.total_frames)?;
        d.set_item("labels", report.labels.clone())?;
        d.set_item("confusion", report.confusion.rows().to_vec())?;
        d.set_item(
            "segments",
            report
                .segments
                .iter()
                .map(|s| (s.name.clone(), s.accuracy))
                .collect::<Vec<_>>(),
        )?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        let c = self.params().config();
        format!(
            "FcnModel(k={}, input={}x{}, params={})",
            c.k,
            c.n_mels,
            c.n_frames,
            self.params().num_params()
        )
    }
}

#[pyfunction]
fn read_wav(path: PathBuf) -> PyResult<PyAudioClip> {
    Ok(PyAudioClip(techdetect::read_wav(path).py()?))
}

#[pyfunction]
fn write_wav(path: PathBuf, clip: &PyAudioClip) -> PyResult<()> {
    techdetect::write_wav(path, &clip.0).py()
}

/// Log-mel spectrogram (128 x n_frames), not normalized.
#[pyfunction]
fn mel_spectrogram<'py>(py: Python<'py>, clip: &PyAudioClip) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let mel = py.detach(|| FeatureExtractor::new().extract(&clip.0)).py()?;
    matrix_to_numpy(py, mel.values())
}

/// One synthesized segment: `(clip, events, clip_ids)`.
#[pyfunction]
#[pyo3(signature = (clips_csv, vocab, seed, index = 0, duration = techdetect::SEGMENT_SECONDS, crossfade = techdetect::CROSSFADE_SECONDS))]
fn synthesize_segment(
    clips_csv: PathBuf,
    vocab: &PyVocabulary,
    seed: u64,
    index: usize,
    duration: f64,
    crossfade: f64,
) -> PyResult<(PyAudioClip, EventList, Vec<usize>)> {
    let lib = load_clip_library(clips_csv, vocab.0.clone()).py()?;
    let seg = techdetect::synthesize_segment(&lib, &mut segment_rng(seed, index), duration, crossfade).py()?;
    let events = events_to_list(&seg.annotation, Some(&vocab.0));
    Ok((PyAudioClip(seg.audio), events, seg.clip_ids))
}

/// Writes `n` segments under `out`; returns the manifest path.
#[pyfunction]
fn build_dataset(py: Python<'_>, clips_csv: PathBuf, vocab: &PyVocabulary, n: usize, seed: u64, out: PathBuf) -> PyResult<PathBuf> {
    let lib = load_clip_library(clips_csv, vocab.0.clone()).py()?;
    py.detach(|| techdetect::build_dataset(&lib, n, seed, &out)).py()?;
    Ok(out.join(techdetect::synth::MANIFEST_FILE))
}

/// Trains the reference network; returns `(model, history)` where history is a list of dicts.
#[pyfunction]
#[pyo3(signature = (train_manifest, val_manifest = None, epochs = None, learning_rate = None, batch_size = None, seed = 0))]
fn train<'py>(
    py: Python<'py>,
    train_manifest: PathBuf,
    val_manifest: Option<PathBuf>,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    seed: u64,
) -> PyResult<(PyFcnModel, Vec<Bound<'py, PyDict>>)> {
    let k = techdetect::DatasetManifest::load(&train_manifest).py()?.vocabulary.len();
    let mut config = FcnConfig::reference(k);
    config.epochs = epochs.unwrap_or(config.epochs);
    config.learning_rate = learning_rate.unwrap_or(config.learning_rate);
    config.batch_size = batch_size.unwrap_or(config.batch_size);
    config.seed = seed;
    let (params, history) = py
        .detach(|| train_from_manifests(&config, &train_manifest, val_manifest.as_deref(), |_| {}))
        .py()?;
    let rows = history
        .epochs
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("train_loss", r.train_loss)?;
            d.set_item("train_accuracy", r.train_accuracy)?;
            d.set_item("val_accuracy", r.val_accuracy)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((PyFcnModel::wrap(params)?, rows))
}

/// Window start times in seconds.
#[pyfunction]
#[pyo3(signature = (duration, window = techdetect::SEGMENT_SECONDS, hop = DEFAULT_HOP_SECONDS))]
fn plan_windows(duration: f64, window: f64, hop: f64) -> PyResult<Vec<f64>> {
    Ok(techdetect::plan_windows(duration, window, hop).py()?.start_seconds())
}

#[pyfunction]
fn frame_accuracy(predicted: Vec<usize>, reference: Vec<usize>) -> PyResult<f64> {
    techdetect::frame_accuracy(&predicted, &reference).py()
}

/// Events `(onset, offset, class_index)` from a k x n_frames probability matrix.
#[pyfunction]
fn decode_events(probs: PyReadonlyArray2<'_, f64>) -> PyResult<EventList> {
    let pred = FramePrediction::new(numpy_to_matrix(&probs)?).py()?;
    Ok(events_to_list(&techdetect::decode_events(&pred), None))
}

/// Frame labels for an `(onset, offset, class_index)` event list.
#[pyfunction]
fn events_to_frame_labels(events: Vec<(f64, f64, usize)>, n_frames: usize) -> PyResult<Vec<usize>> {
    let events = events
        .into_iter()
        .map(|(onset, offset, label)| techdetect::Event { onset, offset, label })
        .collect();
    let ann = EventAnnotation::new(events).py()?;
    Ok(techdetect::events_to_frame_labels(&ann, FRAME_SECONDS, n_frames).py()?.0)
}

/// Events for a frame label sequence.
#[pyfunction]
fn frame_labels_to_event_list(labels: Vec<usize>) -> EventList {
    events_to_list(&frame_labels_to_events(&labels, FRAME_SECONDS), None)
}

/// Runs the command-line interface with `argv` (without the program name); returns the exit code.
#[pyfunction]
fn cli(py: Python<'_>, argv: Vec<String>) -> i32 {
    let args: Vec<String> = std::iter::once("techdetect".to_owned()).chain(argv).collect();
    py.detach(|| techdetect::cli::run(args))
}

#[pymodule]
fn techdetect_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("TechdetectError", m.py().get_type::<TechdetectError>())?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add("SAMPLE_RATE", techdetect::SAMPLE_RATE)?;
    m.add("FRAME_SECONDS", FRAME_SECONDS)?;
    m.add_class::<PyAudioClip>()?;
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyFcnModel>()?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(write_wav, m)?)?;
    m.add_function(wrap_pyfunction!(mel_spectrogram, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_segment, m)?)?;
    m.add_function(wrap_pyfunction!(build_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(plan_windows, m)?)?;
    m.add_function(wrap_pyfunction!(frame_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(decode_events, m)?)?;
    m.add_function(wrap_pyfunction!(events_to_frame_labels, m)?)?;
    m.add_function(wrap_pyfunction!(frame_labels_to_event_list, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
