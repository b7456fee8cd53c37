//! Parse-tree measurement: quantized coupling dictionaries, their
//! conditional entropies, aggregated coupling distributions, and image
//! clusters per dictionary key.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RoutingTrace;
use crate::ops::squash_row_inplace;
use crate::tensor::Tensor;

/// Candidate quantization levels swept by auto-K selection, ascending.
pub const K_SWEEP: [usize; 7] = [2, 4, 8, 16, 32, 64, 128];

/// Slack tolerated on coupling values just outside [0, 1].
const DOMAIN_SLACK: f64 = 1e-9;

/// Uniform quantization index over [0, 1]: `min(floor(c * K), K - 1)`.
#[inline]
pub fn quantize_value(c: f64, k: usize) -> u16 {
    let idx = (c * k as f64).floor();
    if idx < 0.0 {
        0
    } else if idx >= k as f64 {
        (k - 1) as u16
    } else {
        idx as u16
    }
}

/// Center of a quantization bin, the reconstruction value.
#[inline]
pub fn bin_center(index: u16, k: usize) -> f64 {
    (index as f64 + 0.5) / k as f64
}

fn check_quantizer_args(k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::Config(format!("quantizer needs K >= 2, got {k}")));
    }
    if k > u16::MAX as usize {
        return Err(Error::Config(format!("quantizer K {k} too large")));
    }
    Ok(())
}

fn check_domain(c: f64) -> Result<()> {
    if !(-DOMAIN_SLACK..=1.0 + DOMAIN_SLACK).contains(&c) {
        return Err(Error::Domain {
            op: "quantize",
            detail: format!("coupling {c} outside [0, 1]"),
        });
    }
    Ok(())
}

/// Quantize a coupling matrix to bin indices (stored as whole numbers).
pub fn quantize(c: &Tensor, k: usize) -> Result<Tensor> {
    check_quantizer_args(k)?;
    let mut out = Vec::with_capacity(c.len());
    for &v in c.data() {
        check_domain(v)?;
        out.push(quantize_value(v, k) as f64);
    }
    Tensor::from_vec(c.shape(), out)
}

/// A dictionary key: the quantized couplings toward the predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QuantizedKey {
    pub class_id: usize,
    pub symbols: Vec<u16>,
}

impl QuantizedKey {
    /// Decimal indices joined by '.', unambiguous for any K.
    pub fn encode(&self) -> String {
        let mut s = String::with_capacity(self.symbols.len() * 2);
        for (i, sym) in self.symbols.iter().enumerate() {
            if i > 0 {
                s.push('.');
            }
            s.push_str(&sym.to_string());
        }
        s
    }
}

/// Column of quantized couplings toward the predicted class.
pub fn make_key(c_quant: &Tensor, predicted: usize) -> Result<QuantizedKey> {
    let &[ni, nj] = c_quant.shape() else {
        return Err(Error::dimension(
            "make_key",
            format!("expected [I, J], got {:?}", c_quant.shape()),
        ));
    };
    if predicted >= nj {
        return Err(Error::Index {
            what: "predicted class",
            index: predicted,
            len: nj,
        });
    }
    let symbols = (0..ni)
        .map(|i| c_quant.data()[i * nj + predicted] as u16)
        .collect();
    Ok(QuantizedKey {
        class_id: predicted,
        symbols,
    })
}

/// Quantize a raw coupling column directly into key symbols.
pub fn key_from_couplings(couplings: &[f64], ni: usize, nj: usize, predicted: usize, k: usize) -> Result<QuantizedKey> {
    check_quantizer_args(k)?;
    let mut symbols = Vec::with_capacity(ni);
    for i in 0..ni {
        let c = couplings[i * nj + predicted];
        check_domain(c)?;
        symbols.push(quantize_value(c, k));
    }
    Ok(QuantizedKey {
        class_id: predicted,
        symbols,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DictEntry {
    pub count: usize,
    /// Member sample ids, ascending.
    pub members: Vec<usize>,
}

/// Per-class associative arrays from key strings to occurrences.
#[derive(Debug, Clone)]
pub struct ParseDictionary {
    pub k: usize,
    /// Key length every entry must have (the capsule count I).
    pub key_len: usize,
    /// Number of classes J.
    pub num_classes: usize,
    pub per_class: BTreeMap<usize, BTreeMap<String, DictEntry>>,
}

impl ParseDictionary {
    pub fn new(k: usize, key_len: usize, num_classes: usize) -> Result<Self> {
        check_quantizer_args(k)?;
        Ok(ParseDictionary {
            k,
            key_len,
            num_classes,
            per_class: BTreeMap::new(),
        })
    }

    pub fn insert(&mut self, key: &QuantizedKey, sample_id: usize) -> Result<()> {
        if key.symbols.len() != self.key_len {
            return Err(Error::Invariant(format!(
                "key length {} does not match dictionary capsule count {}",
                key.symbols.len(),
                self.key_len
            )));
        }
        if key.class_id >= self.num_classes {
            return Err(Error::Index {
                what: "key class",
                index: key.class_id,
                len: self.num_classes,
            });
        }
        let entry = self
            .per_class
            .entry(key.class_id)
            .or_default()
            .entry(key.encode())
            .or_default();
        entry.count += 1;
        entry.members.push(sample_id);
        Ok(())
    }

    pub fn samples_in_class(&self, j: usize) -> usize {
        self.per_class
            .get(&j)
            .map(|m| m.values().map(|e| e.count).sum())
            .unwrap_or(0)
    }

    pub fn keys_in_class(&self, j: usize) -> usize {
        self.per_class.get(&j).map(|m| m.len()).unwrap_or(0)
    }

    pub fn total_keys(&self) -> usize {
        self.per_class.values().map(|m| m.len()).sum()
    }

    pub fn total_samples(&self) -> usize {
        (0..self.num_classes).map(|j| self.samples_in_class(j)).sum()
    }

    /// Classes with no predicted samples, excluded from the entropy mean.
    pub fn empty_classes(&self) -> Vec<usize> {
        (0..self.num_classes)
            .filter(|j| self.samples_in_class(*j) == 0)
            .collect()
    }
}

/// Build the dictionary from final-iteration traces, processed in
/// ascending sample-id order.
pub fn build_dictionary(
    traces: &[(RoutingTrace, usize, usize)],
    k: usize,
) -> Result<ParseDictionary> {
    check_quantizer_args(k)?;
    let mut order: Vec<usize> = (0..traces.len()).collect();
    order.sort_by_key(|&idx| traces[idx].2);

    let mut dict: Option<ParseDictionary> = None;
    for idx in order {
        let (trace, predicted, sample_id) = &traces[idx];
        let &[ni, nj] = trace.couplings.shape() else {
            return Err(Error::dimension(
                "build_dictionary",
                format!("couplings must be [I, J], got {:?}", trace.couplings.shape()),
            ));
        };
        let dict = match dict.as_mut() {
            Some(d) => {
                if d.key_len != ni || d.num_classes != nj {
                    return Err(Error::Invariant(format!(
                        "inconsistent trace shapes: [{ni}, {nj}] vs [{}, {}]",
                        d.key_len, d.num_classes
                    )));
                }
                d
            }
            None => {
                dict = Some(ParseDictionary::new(k, ni, nj)?);
                dict.as_mut().unwrap()
            }
        };
        let key = key_from_couplings(trace.couplings.data(), ni, nj, *predicted, k)?;
        dict.insert(&key, *sample_id)?;
    }
    dict.ok_or_else(|| Error::Invariant("build_dictionary called with no traces".into()))
}

/// Shannon entropy in bits of the key frequencies within class `j`.
pub fn class_entropy(dict: &ParseDictionary, j: usize) -> Result<f64> {
    let Some(keys) = dict.per_class.get(&j) else {
        return Err(Error::EmptyClass(j));
    };
    let total: usize = keys.values().map(|e| e.count).sum();
    if total == 0 {
        return Err(Error::EmptyClass(j));
    }
    let total = total as f64;
    let mut h = 0.0;
    for entry in keys.values() {
        let p = entry.count as f64 / total;
        h -= p * p.log2();
    }
    Ok(h)
}

/// Mean class entropy over the classes that have predicted samples.
pub fn network_entropy(dict: &ParseDictionary) -> Result<f64> {
    let present: Vec<usize> = (0..dict.num_classes)
        .filter(|j| dict.samples_in_class(*j) > 0)
        .collect();
    if present.is_empty() {
        return Err(Error::Invariant("network entropy of an empty dictionary".into()));
    }
    let mut sum = 0.0;
    for &j in &present {
        sum += class_entropy(dict, j)?;
    }
    Ok(sum / present.len() as f64)
}

/// Mean coupling matrix per true class: `[num_classes, I, J]`.
pub fn aggregate_class_couplings(
    traces: &[(RoutingTrace, usize)],
    num_classes: usize,
) -> Result<Tensor> {
    if traces.is_empty() {
        return Err(Error::Invariant("no traces to aggregate".into()));
    }
    let &[ni, nj] = traces[0].0.couplings.shape() else {
        return Err(Error::dimension(
            "aggregate_class_couplings",
            format!("couplings must be [I, J], got {:?}", traces[0].0.couplings.shape()),
        ));
    };
    let mut sums = vec![0.0; num_classes * ni * nj];
    let mut counts = vec![0usize; num_classes];
    for (trace, label) in traces {
        if trace.couplings.shape() != [ni, nj] {
            return Err(Error::Invariant("inconsistent coupling shapes".into()));
        }
        if *label >= num_classes {
            return Err(Error::Index {
                what: "true label",
                index: *label,
                len: num_classes,
            });
        }
        let dst = &mut sums[label * ni * nj..(label + 1) * ni * nj];
        for (d, &s) in dst.iter_mut().zip(trace.couplings.data()) {
            *d += s;
        }
        counts[*label] += 1;
    }
    for (label, &n) in counts.iter().enumerate() {
        if n > 0 {
            let inv = 1.0 / n as f64;
            for v in &mut sums[label * ni * nj..(label + 1) * ni * nj] {
                *v *= inv;
            }
        }
    }
    Tensor::from_vec(&[num_classes, ni, nj], sums)
}

/// One extracted cluster: key string, occurrence count, and the pixelwise
/// mean of the member images in [0, 1].
#[derive(Debug, Clone)]
pub struct Cluster {
    pub key: String,
    pub count: usize,
    pub overlay: Tensor,
}

/// Top clusters of class `j` by count (ties: lexicographic key ascending).
///
/// `image_of` resolves a member sample id to its image.
pub fn extract_clusters<F>(
    dict: &ParseDictionary,
    image_of: F,
    j: usize,
    top_n: usize,
) -> Result<Vec<Cluster>>
where
    F: Fn(usize) -> Result<Tensor>,
{
    let Some(keys) = dict.per_class.get(&j) else {
        return Err(Error::Index {
            what: "dictionary class",
            index: j,
            len: dict.num_classes,
        });
    };
    let mut ranked: Vec<(&String, &DictEntry)> = keys.iter().collect();
    ranked.sort_by(|a, b| b.1.count.cmp(&a.1.count).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(top_n);

    let mut clusters = Vec::with_capacity(ranked.len());
    for (key, entry) in ranked {
        let mut overlay: Option<Tensor> = None;
        for &id in &entry.members {
            let img = image_of(id)?;
            match overlay.as_mut() {
                None => overlay = Some(img),
                Some(acc) => {
                    if acc.shape() != img.shape() {
                        return Err(Error::Invariant("cluster images differ in shape".into()));
                    }
                    for (a, &b) in acc.data_mut().iter_mut().zip(img.data()) {
                        *a += b;
                    }
                }
            }
        }
        let mut overlay = overlay.expect("entry has at least one member");
        let n = entry.count as f64;
        for v in overlay.data_mut() {
            *v /= n;
        }
        clusters.push(Cluster {
            key: key.clone(),
            count: entry.count,
            overlay,
        });
    }
    Ok(clusters)
}

/// Output norms with the final couplings replaced by the centers of their
/// quantization bins, the accuracy probe for auto-K selection.
pub fn quantized_coupling_norms(
    votes: &[f64],
    couplings: &[f64],
    ni: usize,
    nj: usize,
    d: usize,
    k: usize,
) -> Result<Vec<f64>> {
    check_quantizer_args(k)?;
    let mut s = vec![0.0; nj * d];
    for i in 0..ni {
        for j in 0..nj {
            let c = couplings[i * nj + j];
            check_domain(c)?;
            let cq = bin_center(quantize_value(c, k), k);
            let vote = &votes[(i * nj + j) * d..(i * nj + j + 1) * d];
            let srow = &mut s[j * d..(j + 1) * d];
            for (sv, &uv) in srow.iter_mut().zip(vote) {
                *sv += cq * uv;
            }
        }
    }
    let mut norms = vec![0.0; nj];
    for j in 0..nj {
        let row = &mut s[j * d..(j + 1) * d];
        squash_row_inplace(row);
        norms[j] = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    Ok(norms)
}

// ── report ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub entropy_bits: f64,
    pub num_keys: usize,
    pub num_samples: usize,
}

/// Entropy summary emitted as JSON and CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropyReport {
    pub version: u32,
    pub model_id: String,
    pub k: usize,
    pub per_class: Vec<ClassReport>,
    pub network_entropy_bits: f64,
    /// Classes with zero predicted samples, excluded from the mean.
    pub excluded_classes: Vec<usize>,
    /// Test accuracy with quantized couplings at `k`.
    pub accuracy: f64,
    /// Test accuracy of the unquantized model on the same split.
    pub accuracy_unquantized: f64,
    /// Auto-K sweep record: (K, quantized accuracy), ascending K.
    pub k_sweep: Vec<(usize, f64)>,
}

impl EntropyReport {
    pub fn from_dictionary(
        dict: &ParseDictionary,
        model_id: String,
        accuracy: f64,
        accuracy_unquantized: f64,
        k_sweep: Vec<(usize, f64)>,
    ) -> Result<Self> {
        let mut per_class = Vec::new();
        for j in 0..dict.num_classes {
            if dict.samples_in_class(j) == 0 {
                continue;
            }
            per_class.push(ClassReport {
                class: j,
                entropy_bits: class_entropy(dict, j)?,
                num_keys: dict.keys_in_class(j),
                num_samples: dict.samples_in_class(j),
            });
        }
        Ok(EntropyReport {
            version: 1,
            model_id,
            k: dict.k,
            per_class,
            network_entropy_bits: network_entropy(dict)?,
            excluded_classes: dict.empty_classes(),
            accuracy,
            accuracy_unquantized,
            k_sweep,
        })
    }

    /// One row per class plus a summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,num_samples,num_keys,entropy_bits\n");
        for c in &self.per_class {
            out.push_str(&format!(
                "{},{},{},{:.12}\n",
                c.class, c.num_samples, c.num_keys, c.entropy_bits
            ));
        }
        let total_samples: usize = self.per_class.iter().map(|c| c.num_samples).sum();
        let total_keys: usize = self.per_class.iter().map(|c| c.num_keys).sum();
        out.push_str(&format!(
            "network,{},{},{:.12}\n",
            total_samples, total_keys, self.network_entropy_bits
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn trace_from_couplings(c: Tensor) -> RoutingTrace {
        let &[_, nj] = c.shape() else { panic!() };
        RoutingTrace {
            couplings: c,
            logits: Tensor::zeros(&[1, nj]),
            out_poses: Tensor::zeros(&[nj, 2]),
            out_norms: Tensor::zeros(&[nj]),
        }
    }

    #[test]
    fn quantize_boundaries_clamp() {
        assert_eq!(quantize_value(0.0, 8), 0);
        assert_eq!(quantize_value(1.0, 8), 7);
        assert_eq!(quantize_value(0.49, 2), 0);
        assert_eq!(quantize_value(0.51, 2), 1);
    }

    #[test]
    fn quantize_rejects_out_of_domain() {
        let c = Tensor::from_vec(&[1, 2], vec![0.5, 1.1]).unwrap();
        assert!(matches!(quantize(&c, 4), Err(Error::Domain { .. })));
        let c = Tensor::from_vec(&[1, 1], vec![-0.1]).unwrap();
        assert!(quantize(&c, 4).is_err());
        // slack admits tiny numeric overshoot
        let c = Tensor::from_vec(&[1, 1], vec![1.0 + 5e-10]).unwrap();
        assert_eq!(quantize(&c, 4).unwrap().data()[0], 3.0);
    }

    #[test]
    fn quantize_rejects_small_k() {
        let c = Tensor::zeros(&[1, 1]);
        assert!(quantize(&c, 1).is_err());
    }

    #[test]
    fn bin_center_error_bounded_by_half_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = 4;
        for _ in 0..500 {
            let c: f64 = rng.random_range(0.0..=1.0);
            let err = (bin_center(quantize_value(c, k), k) - c).abs();
            assert!(err <= 1.0 / (2.0 * k as f64) + 1e-12, "c={c} err={err}");
        }
    }

    #[test]
    fn quantize_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let a: f64 = rng.random_range(0.0..=1.0);
            let b: f64 = rng.random_range(0.0..=1.0);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for &k in &K_SWEEP {
                assert!(quantize_value(lo, k) <= quantize_value(hi, k));
            }
        }
    }

    #[test]
    fn make_key_reads_predicted_column() {
        let c = Tensor::from_vec(&[3, 2], vec![0.0, 3.0, 0.0, 1.0, 0.0, 2.0]).unwrap();
        let key = make_key(&c, 1).unwrap();
        assert_eq!(key.symbols, vec![3, 1, 2]);
        assert_eq!(key.encode(), "3.1.2");
        let key0 = make_key(&c, 0).unwrap();
        assert_eq!(key0.encode(), "0.0.0");
    }

    #[test]
    fn identical_quantized_columns_give_identical_keys() {
        let c1 = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 2.0, 0.0]).unwrap();
        let c2 = Tensor::from_vec(&[2, 2], vec![1.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(make_key(&c1, 0).unwrap(), make_key(&c2, 0).unwrap());
    }

    #[test]
    fn uniform_couplings_quantize_to_zero_symbols() {
        // 1/J = 0.1 with J = 10; floor(0.1 * 8) = 0
        let nj = 10;
        let c = Tensor::from_vec(&[4, nj], vec![1.0 / nj as f64; 4 * nj]).unwrap();
        let q = quantize(&c, 8).unwrap();
        let key = make_key(&q, 3).unwrap();
        assert!(key.symbols.iter().all(|&s| s == 0));
    }

    #[test]
    fn dictionary_single_sample() {
        let c = Tensor::from_vec(&[2, 2], vec![0.7, 0.3, 0.2, 0.8]).unwrap();
        let traces = vec![(trace_from_couplings(c), 0usize, 0usize)];
        let dict = build_dictionary(&traces, 4).unwrap();
        assert_eq!(dict.per_class.len(), 1);
        assert_eq!(dict.keys_in_class(0), 1);
        assert_eq!(dict.samples_in_class(0), 1);
    }

    #[test]
    fn dictionary_identical_samples_collapse_to_one_key() {
        let c = Tensor::from_vec(&[2, 2], vec![0.7, 0.3, 0.2, 0.8]).unwrap();
        let traces: Vec<_> = (0..5)
            .map(|id| (trace_from_couplings(c.clone()), 1usize, id))
            .collect();
        let dict = build_dictionary(&traces, 4).unwrap();
        assert_eq!(dict.keys_in_class(1), 1);
        assert_eq!(dict.samples_in_class(1), 5);
        let entry = dict.per_class[&1].values().next().unwrap();
        assert_eq!(entry.members, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn dictionary_counts_match_hand_enumeration() {
        // 6 traces over 2 classes; keys by quantized column at K = 2.
        let mk = |col0: [f64; 2], col1: [f64; 2]| {
            Tensor::from_vec(&[2, 2], vec![col0[0], col1[0], col0[1], col1[1]]).unwrap()
        };
        let traces = vec![
            (trace_from_couplings(mk([0.9, 0.9], [0.1, 0.1])), 0, 0), // key 1.1
            (trace_from_couplings(mk([0.8, 0.7], [0.2, 0.3])), 0, 1), // key 1.1
            (trace_from_couplings(mk([0.2, 0.9], [0.8, 0.1])), 0, 2), // key 0.1
            (trace_from_couplings(mk([0.1, 0.2], [0.9, 0.8])), 1, 3), // key 1.1
            (trace_from_couplings(mk([0.3, 0.3], [0.7, 0.7])), 1, 4), // key 1.1
            (trace_from_couplings(mk([0.4, 0.9], [0.6, 0.1])), 1, 5), // key 1.0
        ];
        let dict = build_dictionary(&traces, 2).unwrap();
        assert_eq!(dict.per_class[&0]["1.1"].count, 2);
        assert_eq!(dict.per_class[&0]["0.1"].count, 1);
        assert_eq!(dict.per_class[&1]["1.1"].count, 2);
        assert_eq!(dict.per_class[&1]["1.0"].count, 1);
        assert_eq!(dict.total_keys(), 4);
        assert_eq!(dict.total_samples(), 6);
    }

    #[test]
    fn dictionary_rejects_inconsistent_capsule_counts() {
        let a = trace_from_couplings(Tensor::from_vec(&[2, 2], vec![0.5; 4]).unwrap());
        let b = trace_from_couplings(Tensor::from_vec(&[3, 2], vec![0.5; 6]).unwrap());
        let err = build_dictionary(&[(a, 0, 0), (b, 0, 1)], 2).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn class_entropy_examples() {
        let mut dict = ParseDictionary::new(2, 1, 3).unwrap();
        // class 0: single key -> 0 bits
        dict.insert(&QuantizedKey { class_id: 0, symbols: vec![0] }, 0).unwrap();
        dict.insert(&QuantizedKey { class_id: 0, symbols: vec![0] }, 1).unwrap();
        assert_eq!(class_entropy(&dict, 0).unwrap(), 0.0);

        // class 1: 4 distinct keys, one each -> 2 bits (K = 2 allows 0/1 per symbol,
        // so widen the key length via a fresh dictionary)
        let mut dict4 = ParseDictionary::new(2, 2, 3).unwrap();
        for (id, sym) in [[0, 0], [0, 1], [1, 0], [1, 1]].iter().enumerate() {
            dict4
                .insert(&QuantizedKey { class_id: 1, symbols: sym.to_vec() }, id)
                .unwrap();
        }
        assert!((class_entropy(&dict4, 1).unwrap() - 2.0).abs() < 1e-15);

        // counts (2, 1, 1) -> 1.5 bits
        let mut dict3 = ParseDictionary::new(2, 2, 3).unwrap();
        for (id, sym) in [[0, 0], [0, 0], [0, 1], [1, 0]].iter().enumerate() {
            dict3
                .insert(&QuantizedKey { class_id: 2, symbols: sym.to_vec() }, id)
                .unwrap();
        }
        assert!((class_entropy(&dict3, 2).unwrap() - 1.5).abs() < 1e-15);

        // empty class is an error, not zero
        assert!(matches!(class_entropy(&dict, 1), Err(Error::EmptyClass(1))));
    }

    #[test]
    fn network_entropy_is_mean_of_present_classes() {
        let mut dict = ParseDictionary::new(2, 2, 4).unwrap();
        // class 0: two equal keys -> 1 bit
        dict.insert(&QuantizedKey { class_id: 0, symbols: vec![0, 0] }, 0).unwrap();
        dict.insert(&QuantizedKey { class_id: 0, symbols: vec![0, 1] }, 1).unwrap();
        // class 2: single key -> 0 bits
        dict.insert(&QuantizedKey { class_id: 2, symbols: vec![1, 1] }, 2).unwrap();
        let h = network_entropy(&dict).unwrap();
        assert!((h - 0.5).abs() < 1e-15);
        assert_eq!(dict.empty_classes(), vec![1, 3]);
    }

    #[test]
    fn network_entropy_of_empty_dictionary_errors() {
        let dict = ParseDictionary::new(2, 2, 2).unwrap();
        assert!(network_entropy(&dict).is_err());
    }

    /// Independent count-and-sum oracle over raw (class, key) pairs.
    fn entropy_oracle(pairs: &[(usize, String)], num_classes: usize) -> (Vec<Option<f64>>, f64) {
        let mut per_class = vec![None; num_classes];
        let mut sum = 0.0;
        let mut present = 0;
        for j in 0..num_classes {
            let keys: Vec<&String> = pairs.iter().filter(|(c, _)| *c == j).map(|(_, k)| k).collect();
            if keys.is_empty() {
                continue;
            }
            let mut counts: std::collections::HashMap<&String, usize> = Default::default();
            for k in &keys {
                *counts.entry(k).or_default() += 1;
            }
            let n = keys.len() as f64;
            let mut h = 0.0;
            for &c in counts.values() {
                let p = c as f64 / n;
                h -= p * p.log2();
            }
            per_class[j] = Some(h);
            sum += h;
            present += 1;
        }
        (per_class, sum / present as f64)
    }

    #[test]
    fn table_style_fixture_matches_oracle() {
        // 10 classes with synthetic counts in the shape of a dictionary-size table
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut dict = ParseDictionary::new(8, 3, 10).unwrap();
        let mut pairs = Vec::new();
        let mut id = 0;
        for j in 0..10 {
            let num_keys = 1 + (j * 7) % 12;
            for kk in 0..num_keys {
                let reps = 1 + rng.random_range(0..5);
                let symbols = vec![(kk % 8) as u16, ((kk / 8) % 8) as u16, (j % 8) as u16];
                let key = QuantizedKey { class_id: j, symbols };
                for _ in 0..reps {
                    dict.insert(&key, id).unwrap();
                    pairs.push((j, key.encode()));
                    id += 1;
                }
            }
        }
        let (per_class, h) = entropy_oracle(&pairs, 10);
        for j in 0..10 {
            let got = class_entropy(&dict, j).unwrap();
            assert!((got - per_class[j].unwrap()).abs() < 1e-12);
        }
        assert!((network_entropy(&dict).unwrap() - h).abs() < 1e-12);
    }

    #[test]
    fn entropy_is_permutation_invariant_and_merge_decreases_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n_keys = rng.random_range(2..8);
            let counts: Vec<usize> = (0..n_keys).map(|_| rng.random_range(1..20)).collect();

            let entropy_of = |counts: &[usize]| -> f64 {
                let total: usize = counts.iter().sum();
                counts
                    .iter()
                    .map(|&c| {
                        let p = c as f64 / total as f64;
                        -p * p.log2()
                    })
                    .sum()
            };

            let mut shuffled = counts.clone();
            shuffled.shuffle(&mut rng);
            assert!((entropy_of(&counts) - entropy_of(&shuffled)).abs() < 1e-12);

            // merging two keys never increases entropy
            let mut merged = counts.clone();
            let a = merged.pop().unwrap();
            merged[0] += a;
            assert!(entropy_of(&merged) <= entropy_of(&counts) + 1e-12);
        }
    }

    #[test]
    fn aggregate_single_sample_per_class_is_identity() {
        let c0 = Tensor::from_vec(&[2, 2], vec![0.6, 0.4, 0.3, 0.7]).unwrap();
        let c1 = Tensor::from_vec(&[2, 2], vec![0.5, 0.5, 0.9, 0.1]).unwrap();
        let traces = vec![
            (trace_from_couplings(c0.clone()), 0usize),
            (trace_from_couplings(c1.clone()), 1usize),
        ];
        let agg = aggregate_class_couplings(&traces, 2).unwrap();
        assert_eq!(&agg.data()[0..4], c0.data());
        assert_eq!(&agg.data()[4..8], c1.data());
    }

    #[test]
    fn aggregate_mean_matches_direct_mean() {
        let mats = [
            vec![0.2, 0.8, 0.5, 0.5],
            vec![0.4, 0.6, 0.1, 0.9],
            vec![0.9, 0.1, 0.3, 0.7],
        ];
        let traces: Vec<_> = mats
            .iter()
            .map(|m| (trace_from_couplings(Tensor::from_vec(&[2, 2], m.clone()).unwrap()), 0usize))
            .collect();
        let agg = aggregate_class_couplings(&traces, 1).unwrap();
        for idx in 0..4 {
            let mean = (mats[0][idx] + mats[1][idx] + mats[2][idx]) / 3.0;
            assert!((agg.data()[idx] - mean).abs() < 1e-15);
        }
        // rows of the mean of row-stochastic matrices still sum to 1
        for row in agg.data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn clusters_rank_by_count_then_key_and_average_pixels() {
        let mut dict = ParseDictionary::new(2, 1, 1).unwrap();
        let k_a = QuantizedKey { class_id: 0, symbols: vec![0] };
        let k_b = QuantizedKey { class_id: 0, symbols: vec![1] };
        dict.insert(&k_a, 0).unwrap();
        dict.insert(&k_a, 1).unwrap();
        dict.insert(&k_b, 2).unwrap();

        let images = [
            Tensor::from_vec(&[1, 2, 2], vec![1.0, 0.0, 0.25, 0.75]).unwrap(),
            Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 0.75, 0.25]).unwrap(),
            Tensor::from_vec(&[1, 2, 2], vec![0.5; 4]).unwrap(),
        ];
        let clusters =
            extract_clusters(&dict, |id| Ok(images[id].clone()), 0, 10).unwrap();
        assert_eq!(clusters.len(), 2);
        assert_eq!(clusters[0].key, "0");
        assert_eq!(clusters[0].count, 2);
        // image + its negative -> constant 0.5 overlay
        assert!(clusters[0].overlay.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        // singleton cluster overlay is the image itself
        assert_eq!(clusters[1].overlay.data(), images[2].data());
    }

    #[test]
    fn five_member_cluster_matches_pixel_loop_oracle() {
        let mut dict = ParseDictionary::new(2, 1, 1).unwrap();
        let key = QuantizedKey { class_id: 0, symbols: vec![0] };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let images: Vec<Tensor> = (0..5)
            .map(|_| {
                Tensor::from_vec(&[1, 3, 3], (0..9).map(|_| rng.random_range(0.0..1.0)).collect())
                    .unwrap()
            })
            .collect();
        for id in 0..5 {
            dict.insert(&key, id).unwrap();
        }
        let clusters = extract_clusters(&dict, |id| Ok(images[id].clone()), 0, 1).unwrap();
        for px in 0..9 {
            let mean: f64 = images.iter().map(|im| im.data()[px]).sum::<f64>() / 5.0;
            assert_eq!(clusters[0].overlay.data()[px], mean);
        }
    }

    #[test]
    fn clusters_of_unknown_class_error() {
        let dict = ParseDictionary::new(2, 1, 1).unwrap();
        assert!(matches!(
            extract_clusters(&dict, |_| Ok(Tensor::zeros(&[1, 1, 1])), 3, 1),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn total_keys_never_exceed_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(1..40);
            let mut dict = ParseDictionary::new(4, 2, 3).unwrap();
            for id in 0..n {
                let key = QuantizedKey {
                    class_id: rng.random_range(0..3),
                    symbols: vec![rng.random_range(0..4) as u16, rng.random_range(0..4) as u16],
                };
                dict.insert(&key, id).unwrap();
            }
            assert!(dict.total_keys() <= n);
        }
    }
}
