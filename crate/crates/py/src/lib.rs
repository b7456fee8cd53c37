//! Python bindings: the main types and operations of the capsule-network
//! library, exchanged as plain lists and dicts.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use remcaps_core::analysis;
use remcaps_core::config::ExperimentConfig;
use remcaps_core::data;
use remcaps_core::error::Error;
use remcaps_core::eval::{evaluate, EvalOptions};
use remcaps_core::model;
use remcaps_core::ops;
use remcaps_core::routing;
use remcaps_core::tensor::Tensor;
use remcaps_core::trainer::{choose_k_slot, dictionary_from_eval, Trainer};

fn err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Dimension { .. } | Error::Domain { .. } | Error::Index { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

#[pyfunction]
fn squash(v: Vec<f64>) -> PyResult<Vec<f64>> {
    let t = Tensor::from_vec(&[v.len()], v).map_err(err)?;
    Ok(ops::squash(&t).map_err(err)?.data().to_vec())
}

#[pyfunction]
fn softmax_rows(rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let ni = rows.len();
    let nj = rows.first().map(|r| r.len()).unwrap_or(0);
    if ni == 0 || nj == 0 || rows.iter().any(|r| r.len() != nj) {
        return Err(PyValueError::new_err("expected a non-empty rectangular matrix"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let t = Tensor::from_vec(&[ni, nj], flat).map_err(err)?;
    let out = ops::softmax_rows(&t).map_err(err)?;
    Ok(out.data().chunks(nj).map(|c| c.to_vec()).collect())
}

#[pyfunction]
fn margin_loss(out_norms: Vec<f64>, target: usize) -> PyResult<f64> {
    let t = Tensor::from_vec(&[out_norms.len()], out_norms).map_err(err)?;
    model::margin_loss(&t, target).map_err(err)
}

/// Run t routing iterations over votes `[I][J][D]`; returns (poses, couplings).
#[pyfunction]
fn dynamic_routing(
    votes: Vec<Vec<Vec<f64>>>,
    t: usize,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let ni = votes.len();
    let nj = votes.first().map(|v| v.len()).unwrap_or(0);
    let d = votes
        .first()
        .and_then(|v| v.first())
        .map(|v| v.len())
        .unwrap_or(0);
    if ni == 0 || nj == 0 || d == 0 {
        return Err(PyValueError::new_err("votes must be a non-empty [I][J][D] array"));
    }
    let mut flat = Vec::with_capacity(ni * nj * d);
    for row in &votes {
        if row.len() != nj {
            return Err(PyValueError::new_err("ragged votes"));
        }
        for v in row {
            if v.len() != d {
                return Err(PyValueError::new_err("ragged votes"));
            }
            flat.extend_from_slice(v);
        }
    }
    let votes = Tensor::from_vec(&[ni, nj, d], flat).map_err(err)?;
    let b = Tensor::zeros(&[ni, nj]);
    let (v, c) = routing::dynamic_routing(&votes, &b, t).map_err(err)?;
    Ok((
        v.data().chunks(d).map(|x| x.to_vec()).collect(),
        c.data().chunks(nj).map(|x| x.to_vec()).collect(),
    ))
}

#[pyfunction]
fn quantize_value(c: f64, k: usize) -> PyResult<u16> {
    if !(0.0..=1.0).contains(&c) {
        return Err(PyValueError::new_err(format!("coupling {c} outside [0, 1]")));
    }
    if k < 2 {
        return Err(PyValueError::new_err("K must be >= 2"));
    }
    Ok(analysis::quantize_value(c, k))
}

#[pyfunction]
fn lobster_step(
    theta: Vec<f64>,
    raw_grad: Vec<f64>,
    grad_update: Vec<f64>,
    eta: f64,
    lambda: f64,
) -> PyResult<Vec<f64>> {
    let mut t = Tensor::from_vec(&[theta.len()], theta).map_err(err)?;
    if raw_grad.len() != t.len() {
        return Err(PyValueError::new_err("raw_grad length mismatch"));
    }
    t.accumulate_grad(&raw_grad);
    remcaps_core::optim::lobster_step(&mut t, &grad_update, eta, lambda, None).map_err(err)?;
    Ok(t.data().to_vec())
}

/// Entropy in bits of a key-count histogram.
#[pyfunction]
fn entropy_bits(counts: Vec<usize>) -> PyResult<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(PyValueError::new_err("entropy of an empty histogram"));
    }
    let mut h = 0.0;
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * p.log2();
        }
    }
    Ok(h)
}

/// Deterministic synthetic shapes dataset.
#[pyclass]
struct SynthDataset {
    inner: data::LabeledDataset,
}

#[pymethods]
impl SynthDataset {
    #[new]
    fn new(n_per_class: usize, classes: usize, image_size: usize, seed: u64) -> PyResult<Self> {
        Ok(SynthDataset {
            inner: data::synth_shapes(n_per_class, classes, image_size, seed).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn label(&self, idx: usize) -> PyResult<usize> {
        if idx >= self.inner.len() {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.inner.label(idx))
    }

    fn image(&self, idx: usize) -> PyResult<Vec<f64>> {
        Ok(self.inner.image(idx).map_err(err)?.data().to_vec())
    }
}

/// A capsule network driven by an experiment config text.
#[pyclass]
struct CapsNet {
    trainer: Trainer,
}

#[pymethods]
impl CapsNet {
    /// Build from config text (same format as the CLI config files).
    #[new]
    fn new(config_text: &str) -> PyResult<Self> {
        let cfg = ExperimentConfig::parse(config_text).map_err(err)?;
        Ok(CapsNet {
            trainer: Trainer::new(cfg).map_err(err)?,
        })
    }

    /// Train one epoch; returns a dict with loss/accuracy/sparsity.
    fn run_epoch<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let log = self.trainer.run_epoch().map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("epoch", log.epoch)?;
        d.set_item("train_loss", log.train_loss)?;
        d.set_item("val_accuracy", log.val_accuracy)?;
        d.set_item("sparsity", log.sparsity)?;
        d.set_item("newly_masked", log.newly_masked)?;
        Ok(d)
    }

    /// Forward one flat image; returns (predicted, out_norms, couplings).
    fn forward(&self, image: Vec<f64>) -> PyResult<(usize, Vec<f64>, Vec<Vec<f64>>)> {
        let (c, h, w) = self.trainer.config().model.input_shape;
        let t = Tensor::from_vec(&[c, h, w], image).map_err(err)?;
        let trace = self.trainer.net.forward(&t).map_err(err)?;
        let nj = self.trainer.config().model.num_classes;
        Ok((
            model::predict(&trace),
            trace.out_norms.data().to_vec(),
            trace.couplings.data().chunks(nj).map(|r| r.to_vec()).collect(),
        ))
    }

    /// Accuracy and network entropy over a synthetic dataset at fixed K.
    fn analyze(&self, ds: &SynthDataset, k: usize) -> PyResult<(f64, f64)> {
        let result = evaluate(
            &self.trainer.net,
            &ds.inner,
            &EvalOptions {
                k_candidates: vec![k],
                collect_keys: true,
                aggregate_couplings: false,
            },
        )
        .map_err(err)?;
        let slot = choose_k_slot(&remcaps_core::config::KChoice::Fixed(k), &result);
        let dict = dictionary_from_eval(
            &result,
            slot,
            k,
            self.trainer.net.dims().num_primary,
            self.trainer.config().model.num_classes,
        )
        .map_err(err)?;
        let h = analysis::network_entropy(&dict).map_err(err)?;
        Ok((result.accuracy, h))
    }

    fn sparsity(&self) -> f64 {
        self.trainer.prune.sparsity()
    }
}

#[pymodule]
fn remcaps_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(squash, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_rows, m)?)?;
    m.add_function(wrap_pyfunction!(margin_loss, m)?)?;
    m.add_function(wrap_pyfunction!(dynamic_routing, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_value, m)?)?;
    m.add_function(wrap_pyfunction!(lobster_step, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_bits, m)?)?;
    m.add_class::<SynthDataset>()?;
    m.add_class::<CapsNet>()?;
    Ok(())
}
