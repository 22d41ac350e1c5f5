//! Python bindings: feature extraction, tag parsing, losses, scoring,
//! speaker splits, the synthetic corpus and the classifier.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use sedkit_core::corpus::{self, ClipRecord, LabelVector, Split, SynthSpec, Tag};
use sedkit_core::frontend::{Fbank, FbankConfig, FeatureMatrix, Waveform};
use sedkit_core::metrics::{self, ConfusionCounts};
use sedkit_core::network::{Checkpoint, Model, ModelConfig};
use sedkit_core::{cli, trainer, Error};

fn py_err(e: Error) -> PyErr {
    match e.root() {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::NumericalAbort { .. } | Error::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tags_of(tasks: Option<Vec<String>>) -> PyResult<Vec<Tag>> {
    match tasks {
        None => Ok(Tag::ALL.to_vec()),
        Some(names) => names.iter().map(|n| n.parse().map_err(py_err)).collect(),
    }
}

fn labels_of(rows: &[Vec<u8>]) -> PyResult<Vec<LabelVector>> {
    rows.iter()
        .map(|r| {
            let bits: [u8; 5] = r
                .as_slice()
                .try_into()
                .map_err(|_| PyValueError::new_err(format!("label rows need 5 entries, got {}", r.len())))?;
            if bits.iter().any(|&b| b > 1) {
                return Err(PyValueError::new_err(format!("labels must be 0 or 1, got {bits:?}")));
            }
            Ok(LabelVector::from_bits(bits))
        })
        .collect()
}

fn features_of(rows: Vec<Vec<f32>>) -> PyResult<FeatureMatrix> {
    let t = rows.len();
    let bins = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != bins) {
        return Err(PyValueError::new_err("feature rows have unequal lengths"));
    }
    FeatureMatrix::new(rows.into_iter().flatten().collect(), t, bins).map_err(py_err)
}

fn loss_batch(targets: Vec<Vec<f64>>, logits: Vec<Vec<f64>>, pos_weight: Option<Vec<f64>>) -> PyResult<trainer::LossBatch> {
    let n = targets.len();
    let width = targets.first().map_or(0, Vec::len);
    let pos_weight = pos_weight.unwrap_or_else(|| vec![1.0; width]);
    let flat = |m: Vec<Vec<f64>>| -> PyResult<Vec<f64>> {
        if m.len() != n || m.iter().any(|r| r.len() != width) {
            return Err(PyValueError::new_err(format!("expected a {n} x {width} matrix")));
        }
        Ok(m.into_iter().flatten().collect())
    };
    trainer::LossBatch::new(n, width, flat(targets)?, flat(logits)?, pos_weight).map_err(py_err)
}

/// Canonical label order.
#[pyfunction]
fn tag_order() -> Vec<&'static str> {
    Tag::ALL.iter().map(|t| t.marker()).collect()
}

/// Clip-level 0/1 labels for a tagged transcript.
#[pyfunction]
fn parse_tags(transcript: &str) -> Vec<i64> {
    corpus::parse_annotation_tags(transcript).bits().map(i64::from).to_vec()
}

/// Resolves `five`, `three`, `single:<tag>` or a tag list.
#[pyfunction]
fn task_config(spec: &str) -> PyResult<Vec<&'static str>> {
    let tags = trainer::build_task_config(spec).map_err(py_err)?;
    Ok(tags.iter().map(|t| t.marker()).collect())
}

/// 80-bin log-mel features, one row per 10 ms frame.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate = 16000))]
fn fbank(samples: Vec<f32>, sample_rate: u32) -> PyResult<Vec<Vec<f32>>> {
    let fb = Fbank::new(FbankConfig::default()).map_err(py_err)?;
    let f = fb.compute(&Waveform::new(samples, sample_rate)).map_err(py_err)?;
    Ok((0..f.num_frames()).map(|t| f.frame(t).to_vec()).collect())
}

/// Samples and sample rate of a WAV file.
#[pyfunction]
fn load_wav(path: PathBuf) -> PyResult<(Vec<f32>, u32)> {
    let w = sedkit_core::frontend::load_wav(path).map_err(py_err)?;
    Ok((w.samples, w.sample_rate))
}

/// Mean binary cross-entropy on logits; `pos_weight` scales each column's
/// positive term.
#[pyfunction]
#[pyo3(signature = (targets, logits, pos_weight = None))]
fn bce_with_logits(targets: Vec<Vec<f64>>, logits: Vec<Vec<f64>>, pos_weight: Option<Vec<f64>>) -> PyResult<f64> {
    trainer::bce_with_logits(&loss_batch(targets, logits, pos_weight)?).map_err(py_err)
}

/// Focal loss; `alpha=None` weights both classes by 1.
#[pyfunction]
#[pyo3(signature = (targets, logits, gamma = 2.0, alpha = Some(0.25), pos_weight = None))]
fn focal_loss(
    targets: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
    gamma: f64,
    alpha: Option<f64>,
    pos_weight: Option<Vec<f64>>,
) -> PyResult<f64> {
    trainer::focal_loss(&loss_batch(targets, logits, pos_weight)?, gamma, alpha).map_err(py_err)
}

/// Per-task positive weights `clamp(neg/pos, 1, 50)`.
#[pyfunction]
#[pyo3(signature = (labels, tasks = None))]
fn class_weights(labels: Vec<Vec<u8>>, tasks: Option<Vec<String>>) -> PyResult<Vec<f64>> {
    let cw = trainer::class_weights(&labels_of(&labels)?, &tags_of(tasks)?).map_err(py_err)?;
    Ok(cw.weights)
}

/// Per-task F1 (in task order) and their mean.
#[pyfunction]
#[pyo3(signature = (predictions, references, tasks = None))]
fn f1_scores(predictions: Vec<Vec<u8>>, references: Vec<Vec<u8>>, tasks: Option<Vec<String>>) -> PyResult<(Vec<f64>, f64)> {
    let tasks = tags_of(tasks)?;
    let counts: ConfusionCounts =
        metrics::accumulate_confusion(&tasks, &labels_of(&predictions)?, &labels_of(&references)?).map_err(py_err)?;
    let f1: Vec<f64> = metrics::f1_scores(&counts).iter().map(|s| s.f1).collect();
    let mean = metrics::f1_final(&f1).map_err(py_err)?;
    Ok((f1, mean))
}

/// Mean of per-task scores.
#[pyfunction]
fn f1_final(scores: Vec<f64>) -> PyResult<f64> {
    metrics::f1_final(&scores).map_err(py_err)
}

/// Assigns each clip's speaker to `train`, `dev` or `test`.
#[pyfunction]
#[pyo3(signature = (speakers, fractions = (0.614, 0.10, 0.286), seed = 0))]
fn split_by_speaker(speakers: Vec<String>, fractions: (f64, f64, f64), seed: u64) -> PyResult<Vec<&'static str>> {
    let records: Vec<ClipRecord> = speakers
        .iter()
        .enumerate()
        .map(|(i, s)| ClipRecord {
            id: i.to_string(),
            audio_path: PathBuf::new(),
            speaker_id: s.clone(),
            transcript: None,
            labels: LabelVector::default(),
            split: None,
        })
        .collect();
    let split = corpus::split_by_speaker(&records, [fractions.0, fractions.1, fractions.2], seed).map_err(py_err)?;
    let mut out = vec![""; speakers.len()];
    for (part, name) in [(Split::Train, "train"), (Split::Dev, "dev"), (Split::Test, "test")] {
        for r in split.get(part) {
            out[r.id.parse::<usize>().expect("index ids")] = name;
        }
    }
    Ok(out)
}

/// Renders a synthetic corpus under `out_dir`; returns
/// `(id, wav path, speaker, labels)` per clip.
#[pyfunction]
#[pyo3(signature = (out_dir, num_clips = 500, seed = 0, clip_seconds = 2.0, event_probs = [0.3; 5]))]
fn synth_generate(
    out_dir: PathBuf,
    num_clips: usize,
    seed: u64,
    clip_seconds: f64,
    event_probs: [f64; 5],
) -> PyResult<Vec<(String, PathBuf, String, Vec<i64>)>> {
    let spec = SynthSpec {
        num_clips,
        seed,
        clip_seconds,
        event_probs,
        ..SynthSpec::default()
    };
    let records = corpus::synth_generate(&spec, out_dir).map_err(py_err)?;
    Ok(records
        .into_iter()
        .map(|r| (r.id, r.audio_path, r.speaker_id, r.labels.bits().map(i64::from).to_vec()))
        .collect())
}

/// Runs the command-line tool in-process; returns `(exit code, stdout)`.
#[pyfunction]
fn run_cli(args: Vec<String>) -> (i32, String) {
    let mut out = Vec::new();
    let code = cli::run_cli(std::iter::once("sedkit".to_string()).chain(args), &mut out);
    (code, String::from_utf8_lossy(&out).into_owned())
}

/// The Conformer + BiLSTM multi-task classifier.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Model<f32>,
}

#[pymethods]
impl PyModel {
    /// `config` is a JSON object of model settings; missing keys take
    /// defaults.
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = match config {
            Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => ModelConfig::default(),
        };
        Ok(Self {
            inner: Model::new(cfg, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(path).map_err(py_err)?.model,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::new(self.inner.clone()).save(path).map_err(py_err)
    }

    fn config(&self) -> String {
        serde_json::to_string(&self.inner.config).expect("config serializes")
    }

    fn tasks(&self) -> Vec<&'static str> {
        self.inner.config.task_subset.iter().map(|t| t.marker()).collect()
    }

    fn num_parameters(&self) -> usize {
        self.inner.params.scalar_count()
    }

    /// Eval-mode logits, one row per active task.
    fn forward(&self, features: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f64>>> {
        let logits = self.inner.forward(&features_of(features)?, false, 0).map_err(py_err)?;
        Ok((0..logits.num_tasks()).map(|k| logits.task(k).to_vec()).collect())
    }

    /// 0/1 labels in canonical order; inactive tasks are 0.
    fn predict(&self, features: Vec<Vec<f32>>) -> PyResult<Vec<i64>> {
        let logits = self.inner.forward(&features_of(features)?, false, 0).map_err(py_err)?;
        Ok(metrics::predict_labels(&logits).bits().map(i64::from).to_vec())
    }
}

#[pymodule]
fn sedkit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tag_order, m)?)?;
    m.add_function(wrap_pyfunction!(parse_tags, m)?)?;
    m.add_function(wrap_pyfunction!(task_config, m)?)?;
    m.add_function(wrap_pyfunction!(fbank, m)?)?;
    m.add_function(wrap_pyfunction!(load_wav, m)?)?;
    m.add_function(wrap_pyfunction!(bce_with_logits, m)?)?;
    m.add_function(wrap_pyfunction!(focal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(class_weights, m)?)?;
    m.add_function(wrap_pyfunction!(f1_scores, m)?)?;
    m.add_function(wrap_pyfunction!(f1_final, m)?)?;
    m.add_function(wrap_pyfunction!(split_by_speaker, m)?)?;
    m.add_function(wrap_pyfunction!(synth_generate, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
