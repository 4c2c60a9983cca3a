//! Python bindings. Reports come back as plain dicts and lists.

use std::path::PathBuf;

use hbaf::autograd::Matrix;
use hbaf::config::{Ablations, ModelConfig};
use hbaf::contrastive::ContrastiveConfig;
use hbaf::feature_store::{
    dataset_digest, generate_synthetic, load_dataset, write_dataset, EmotionLabelSet, SignalMode, Split, SynthSpec,
};
use hbaf::train_eval::{self, EvalReport, GradCheckOptions, HbafModel, TrainConfig};
use hbaf::HbafError;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(hbaf_py, HbafException, PyException);

fn py_err(e: HbafError) -> PyErr {
    HbafException::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| HbafException::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Rows of equal length into a matrix.
pub fn matrix(rows: &[Vec<f64>]) -> hbaf::Result<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
        return Err(HbafError::DimMismatch {
            context: "matrix rows".into(),
            expected: cols,
            found: bad.len(),
        });
    }
    let flat = rows.iter().flatten().copied().collect();
    Ok(Matrix::from_shape_vec((rows.len(), cols), flat).expect("shape checked"))
}

fn ablations(names: &[String]) -> hbaf::Result<Ablations> {
    let mut a = Ablations::default();
    for n in names {
        a.set(n)?;
    }
    Ok(a)
}

/// Writes a synthetic dataset to `out` and returns its sha256 digest.
#[pyfunction]
#[pyo3(signature = (out, dialogues=8, utterances=6, classes=4, mode="agreement", seed=0, audio_dim=16, text_dim=16, noise=0.3, val=4, test=4))]
#[allow(clippy::too_many_arguments)]
fn synthesize(
    out: PathBuf,
    dialogues: usize,
    utterances: usize,
    classes: usize,
    mode: &str,
    seed: u64,
    audio_dim: usize,
    text_dim: usize,
    noise: f64,
    val: usize,
    test: usize,
) -> PyResult<String> {
    let spec = SynthSpec {
        n_dialogues: dialogues,
        utterances_per_dialogue: utterances,
        num_classes: classes,
        audio_dim,
        text_dim,
        signal_mode: SignalMode::parse(mode).map_err(py_err)?,
        noise_std: noise,
        seed,
        val_dialogues: val,
        test_dialogues: test,
    };
    let (manifest, records) = generate_synthetic(&spec).map_err(py_err)?;
    write_dataset(&out, &manifest, &records).map_err(py_err)?;
    Ok(dataset_digest(&manifest, &records))
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: HbafModel,
    ablations: Ablations,
}

#[pymethods]
impl PyModel {
    /// A fresh model. `width` selects the reduced preset; without it the
    /// full-size widths are used.
    #[new]
    #[pyo3(signature = (audio_dim, text_dim, labels, width=None, seed=0))]
    fn new(audio_dim: usize, text_dim: usize, labels: Vec<String>, width: Option<usize>, seed: u64) -> PyResult<Self> {
        let labels = EmotionLabelSet::new(labels).map_err(py_err)?;
        let c = labels.len();
        let cfg = match width {
            Some(d) => ModelConfig::reduced(d, audio_dim, text_dim, c),
            None => ModelConfig {
                audio_dim,
                text_dim,
                ..ModelConfig::full(c)
            },
        };
        let inner = HbafModel::new(cfg, labels, seed).map_err(py_err)?;
        Ok(PyModel {
            inner,
            ablations: Ablations::default(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, ablations) = HbafModel::load(&path).map_err(py_err)?;
        Ok(PyModel { inner, ablations })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path, self.ablations).map_err(py_err)
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.labels.names().to_vec()
    }

    #[getter]
    fn ablations(&self) -> Vec<&'static str> {
        self.ablations.active()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.store.iter().map(|(_, _, m)| m.len()).sum()
    }

    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.cfg)
    }

    /// Trains on the `train` split with early stopping on `val`; returns
    /// the per-epoch history.
    #[pyo3(signature = (data, epochs=100, lr=1e-4, mu=0.2, seed=0, batch_size=8, patience=15, ablate=Vec::new()))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        data: PathBuf,
        epochs: usize,
        lr: f64,
        mu: f64,
        seed: u64,
        batch_size: usize,
        patience: usize,
        ablate: Vec<String>,
    ) -> PyResult<Py<PyAny>> {
        let ds = load_dataset(&data).map_err(py_err)?;
        let cfg = TrainConfig {
            learning_rate: lr,
            max_epochs: epochs,
            mu,
            seed,
            batch_size,
            patience,
            ablations: ablations(&ablate).map_err(py_err)?,
            ..Default::default()
        };
        let (tr, va) = (ds.split_owned(Split::Train), ds.split_owned(Split::Val));
        let outcome = py
            .detach(|| train_eval::train(&mut self.inner, &tr, &va, &cfg))
            .map_err(py_err)?;
        self.ablations = cfg.ablations;
        to_py(py, &outcome.history)
    }

    #[pyo3(signature = (data, split="test"))]
    fn evaluate(&self, py: Python<'_>, data: PathBuf, split: &str) -> PyResult<Py<PyAny>> {
        let ds = load_dataset(&data).map_err(py_err)?;
        let split = Split::parse(split).map_err(py_err)?;
        let cfg = TrainConfig {
            ablations: self.ablations,
            ..Default::default()
        };
        let records = ds.split_owned(split);
        let (report, loss) = train_eval::evaluate(&self.inner, &records, &cfg).map_err(py_err)?;
        to_py(py, &serde_json::json!({ "report": report, "loss": loss }))
    }
}

/// Finite-difference check of the whole network at width `width`.
#[pyfunction]
#[pyo3(signature = (width=8, seed=1, mu=0.2, tolerance=1e-4, corrupt=None))]
fn grad_check(
    py: Python<'_>,
    width: usize,
    seed: u64,
    mu: f64,
    tolerance: f64,
    corrupt: Option<String>,
) -> PyResult<Py<PyAny>> {
    let opts = GradCheckOptions {
        tolerance,
        corrupt,
        ..Default::default()
    };
    let report = py
        .detach(|| train_eval::grad_check(width, seed, mu, &Ablations::default(), &opts))
        .map_err(py_err)?;
    let passed = report.passed();
    let max_rel_err = report.max_rel_err();
    to_py(
        py,
        &serde_json::json!({ "passed": passed, "max_rel_err": max_rel_err, "tensors": report.tensors }),
    )
}

/// Inter-modal contrastive loss over row-aligned embeddings.
#[pyfunction]
#[pyo3(signature = (h_a, h_l, h_m, tau=0.1))]
fn inter_modal_loss(
    py: Python<'_>,
    h_a: Vec<Vec<f64>>,
    h_l: Vec<Vec<f64>>,
    h_m: Vec<Vec<f64>>,
    tau: f64,
) -> PyResult<Py<PyAny>> {
    let cfg = ContrastiveConfig {
        tau,
        ..Default::default()
    };
    let (am, lm, al, total) =
        hbaf::contrastive::inter_modal_values(&matrix(&h_a).map_err(py_err)?, &matrix(&h_l).map_err(py_err)?, &matrix(&h_m).map_err(py_err)?, &cfg)
            .map_err(py_err)?;
    to_py(
        py,
        &serde_json::json!({ "audio_fused": am, "text_fused": lm, "audio_text": al, "total": total }),
    )
}

/// Mean negative log-likelihood of `labels` under row-stochastic `probs`.
#[pyfunction]
fn cross_entropy(probs: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    let p = matrix(&probs).map_err(py_err)?;
    if p.nrows() != labels.len() || labels.iter().any(|&y| y >= p.ncols()) {
        return Err(HbafException::new_err("labels do not fit the probability matrix"));
    }
    Ok(train_eval::cross_entropy(&p, &labels))
}

/// Support-weighted F1 over `num_classes` classes.
#[pyfunction]
fn weighted_f1(labels: Vec<usize>, preds: Vec<usize>, num_classes: usize) -> PyResult<f64> {
    let names: Vec<String> = (0..num_classes).map(|i| i.to_string()).collect();
    let r = EvalReport::from_predictions(&labels, &preds, &names).map_err(py_err)?;
    Ok(r.weighted_f1)
}

#[pymodule]
fn hbaf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HbafError", m.py().get_type::<HbafException>())?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(inter_modal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_f1, m)?)?;
    Ok(())
}
