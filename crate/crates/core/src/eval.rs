//! Parallel forward-pass evaluation over a dataset: accuracy, quantized
//! accuracy per candidate K, dictionary keys, and coupling aggregates.
//! Per-sample results are merged in sample order, so the outcome does not
//! depend on the worker count.

use rayon::prelude::*;

use crate::analysis::{key_from_couplings, quantized_coupling_norms};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{predict, CapsNet};

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Quantization levels to probe (bin-center couplings at the final
    /// iteration), ascending.
    pub k_candidates: Vec<usize>,
    /// Keep the per-sample key symbols for every candidate K.
    pub collect_keys: bool,
    /// Accumulate mean coupling matrices per true class.
    pub aggregate_couplings: bool,
}

#[derive(Debug, Clone)]
pub struct SampleEval {
    pub predicted: usize,
    pub label: usize,
    /// Key symbols toward the predicted class, one per candidate K.
    pub keys: Vec<Vec<u16>>,
    /// Predictions under bin-center couplings, one per candidate K.
    pub quant_predicted: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub n: usize,
    pub accuracy: f64,
    /// (K, accuracy under quantized couplings), same order as candidates.
    pub quant_accuracy: Vec<(usize, f64)>,
    pub samples: Vec<SampleEval>,
    /// Mean coupling matrix per true class, `[num_classes * I * J]`, with
    /// per-class sample counts.
    pub coupling_means: Option<(Vec<f64>, Vec<usize>)>,
}

fn argmax_low_tie(values: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = values[0];
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Run the model over every sample of `ds`.
pub fn evaluate(net: &CapsNet, ds: &LabeledDataset, opts: &EvalOptions) -> Result<EvalResult> {
    if ds.is_empty() {
        return Err(Error::Invariant("evaluation over an empty dataset".into()));
    }
    let dims = net.dims();
    let ni = dims.num_primary;
    let nj = net.config().num_classes;
    let dout = net.config().out_dim;
    if ds.num_classes() > nj {
        return Err(Error::Config(format!(
            "dataset has labels up to {} but the model has {} classes",
            ds.num_classes() - 1,
            nj
        )));
    }

    struct PerSample {
        eval: SampleEval,
        couplings: Option<Vec<f64>>,
    }

    let per_sample: Vec<PerSample> = (0..ds.len())
        .into_par_iter()
        .map(|idx| -> Result<PerSample> {
            let image = ds.image(idx)?;
            let (trace, cache) = net.forward_cached(&image)?;
            let predicted = predict(&trace);
            let mut keys = Vec::new();
            let mut quant_predicted = Vec::new();
            for &k in &opts.k_candidates {
                let norms = quantized_coupling_norms(
                    cache.votes(),
                    cache.final_couplings(),
                    ni,
                    nj,
                    dout,
                    k,
                )?;
                quant_predicted.push(argmax_low_tie(&norms));
                if opts.collect_keys {
                    keys.push(
                        key_from_couplings(cache.final_couplings(), ni, nj, predicted, k)?
                            .symbols,
                    );
                }
            }
            Ok(PerSample {
                eval: SampleEval {
                    predicted,
                    label: ds.label(idx),
                    keys,
                    quant_predicted,
                },
                couplings: opts
                    .aggregate_couplings
                    .then(|| cache.final_couplings().to_vec()),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = per_sample.len();
    let mut correct = 0usize;
    let mut quant_correct = vec![0usize; opts.k_candidates.len()];
    let mut coupling_sums = opts
        .aggregate_couplings
        .then(|| (vec![0.0; nj * ni * nj], vec![0usize; nj]));

    let mut samples = Vec::with_capacity(n);
    for ps in per_sample {
        let s = ps.eval;
        if s.predicted == s.label {
            correct += 1;
        }
        for (slot, &qp) in quant_correct.iter_mut().zip(&s.quant_predicted) {
            if qp == s.label {
                *slot += 1;
            }
        }
        if let (Some((sums, counts)), Some(c)) = (coupling_sums.as_mut(), ps.couplings.as_ref()) {
            let dst = &mut sums[s.label * ni * nj..(s.label + 1) * ni * nj];
            for (d, &v) in dst.iter_mut().zip(c) {
                *d += v;
            }
            counts[s.label] += 1;
        }
        samples.push(s);
    }

    let coupling_means = coupling_sums.map(|(mut sums, counts)| {
        for (label, &cnt) in counts.iter().enumerate() {
            if cnt > 0 {
                let inv = 1.0 / cnt as f64;
                for v in &mut sums[label * ni * nj..(label + 1) * ni * nj] {
                    *v *= inv;
                }
            }
        }
        (sums, counts)
    });

    Ok(EvalResult {
        n,
        accuracy: correct as f64 / n as f64,
        quant_accuracy: opts
            .k_candidates
            .iter()
            .zip(quant_correct)
            .map(|(&k, c)| (k, c as f64 / n as f64))
            .collect(),
        samples,
        coupling_means,
    })
}

/// Plain accuracy without quantization probes.
pub fn accuracy(net: &CapsNet, ds: &LabeledDataset) -> Result<f64> {
    Ok(evaluate(net, ds, &EvalOptions::default())?.accuracy)
}
