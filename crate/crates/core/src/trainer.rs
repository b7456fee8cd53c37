//! The training loop: seeded shuffling and augmentation, batch-parallel
//! forward/backward with sample-order gradient merging, shrinkage
//! updates, epoch-boundary threshold masking, and validation tracking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::analysis::{network_entropy, ParseDictionary, QuantizedKey, K_SWEEP};
use crate::config::{ExperimentConfig, KChoice};
use crate::data::{augment_shift, LabeledDataset, SplitTag};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalResult};
use crate::model::{CapsNet, CapsNetParams, ParamGrads};
use crate::optim::{is_prunable, lobster_step, threshold_prune, Momentum, PruneState};

/// Samples per parallel gradient task. Fixed so the merge order (and the
/// floating-point result) does not depend on the worker count.
const GRAD_CHUNK: usize = 4;

/// splitmix64, used to derive independent deterministic seeds.
fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_AUGMENT: u64 = 3;

pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_INIT))
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub sparsity: f64,
    pub val_entropy_bits: Option<f64>,
    pub newly_masked: usize,
}

/// Snapshot of the best-validation model seen so far.
#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub val_accuracy: f64,
    pub params: CapsNetParams,
    pub masks: std::collections::BTreeMap<String, Vec<bool>>,
}

pub struct Trainer {
    pub net: CapsNet,
    pub prune: PruneState,
    cfg: ExperimentConfig,
    train: LabeledDataset,
    val: LabeledDataset,
    momentum: Momentum,
    epoch: usize,
    best: Option<BestSnapshot>,
}

impl Trainer {
    /// Load the training data, carve the validation split, and initialize
    /// the model from the configured seed.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let full_train = cfg.data.source.load(SplitTag::Train)?;
        let limited = full_train.take(cfg.data.train_limit)?;
        let (train, val) = limited.split_train_val()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config(format!(
                "training set of {} samples is too small for a 10% validation carve",
                limited.len()
            )));
        }
        Self::with_datasets(cfg, train, val)
    }

    /// Variant with datasets supplied directly (used by tests).
    pub fn with_datasets(
        cfg: ExperimentConfig,
        train: LabeledDataset,
        val: LabeledDataset,
    ) -> Result<Self> {
        let (c, h, w) = train.image_dims();
        if (c, h, w) != cfg.model.input_shape {
            return Err(Error::Config(format!(
                "dataset images are {c}x{h}x{w} but the model expects {:?}",
                cfg.model.input_shape
            )));
        }
        let mut rng = init_rng(cfg.optimizer.seed);
        let net = CapsNet::new(cfg.model.clone(), &mut rng)?;
        let momentum = Momentum::new(&net.params, cfg.optimizer.momentum)?;
        let prune = PruneState::new(
            &net.params,
            if cfg.prune.enabled { cfg.optimizer.lambda } else { 0.0 },
            cfg.optimizer.eta,
            cfg.prune.threshold,
            cfg.prune.tolerance,
        )?;
        Ok(Trainer {
            net,
            prune,
            cfg,
            train,
            val,
            momentum,
            epoch: 0,
            best: None,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn epochs_run(&self) -> usize {
        self.epoch
    }

    pub fn best(&self) -> Option<&BestSnapshot> {
        self.best.as_ref()
    }

    pub fn val_accuracy(&self) -> Result<f64> {
        crate::eval::accuracy(&self.net, &self.val)
    }

    /// Mean gradients over one batch, merged in sample order.
    fn batch_gradients(&self, ds: &LabeledDataset, batch: &[usize]) -> Result<(ParamGrads, f64)> {
        let chunks: Vec<&[usize]> = batch.chunks(GRAD_CHUNK).collect();
        let partials: Vec<(ParamGrads, f64)> = chunks
            .into_par_iter()
            .map(|chunk| -> Result<(ParamGrads, f64)> {
                let mut grads = ParamGrads::zeros_like(&self.net.params);
                let mut loss = 0.0;
                for &idx in chunk {
                    let image = ds.image(idx)?;
                    let (trace, cache) = self.net.forward_cached(&image)?;
                    loss += self
                        .net
                        .backward_into(&trace, &cache, ds.label(idx), &mut grads)?;
                }
                Ok((grads, loss))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut iter = partials.into_iter();
        let (mut grads, mut loss) = iter.next().expect("non-empty batch");
        for (g, l) in iter {
            grads.add_assign(&g);
            loss += l;
        }
        let inv = 1.0 / batch.len() as f64;
        grads.scale(inv);
        Ok((grads, loss * inv))
    }

    fn apply_update(&mut self, grads: &ParamGrads) -> Result<()> {
        let eta = self.cfg.optimizer.eta;
        let lambda = self.prune.lambda;
        let named_grads: [(&str, &[f64]); 5] = [
            ("conv1.kernels", &grads.conv1_kernels),
            ("conv1.bias", &grads.conv1_bias),
            ("primary.kernels", &grads.primary_kernels),
            ("primary.bias", &grads.primary_bias),
            ("w", &grads.w),
        ];
        for (name, grad) in named_grads {
            let mask = self.prune.masks.get(name).map(|m| m.clone());
            let velocity = self.momentum.update(name, grad, mask.as_deref()).to_vec();
            for (n, tensor) in self.net.params.named_mut() {
                if n == name {
                    tensor.zero_grad();
                    tensor.accumulate_grad(grad);
                    let (eff_lambda, eff_mask) = if is_prunable(name) {
                        (lambda, mask.as_deref())
                    } else {
                        (0.0, None)
                    };
                    lobster_step(tensor, &velocity, eta, eff_lambda, eff_mask)?;
                }
            }
        }
        Ok(())
    }

    /// One full pass over the training split.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let seed = self.cfg.optimizer.seed;
        let epoch = self.epoch;

        let train = if self.cfg.data.augment_shift > 0 {
            augment_shift(
                &self.train,
                self.cfg.data.augment_shift,
                derive_seed(seed, TAG_AUGMENT.wrapping_add((epoch as u64) << 8)),
            )?
        } else {
            self.train.clone()
        };

        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_SHUFFLE.wrapping_add((epoch as u64) << 8)));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(self.cfg.optimizer.batch) {
            let (grads, loss) = self.batch_gradients(&train, batch)?;
            self.apply_update(&grads)?;
            loss_sum += loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;

        let mut val_accuracy = self.val_accuracy()?;
        let mut newly_masked = 0;
        if self.cfg.prune.enabled && self.cfg.prune.threshold > 0.0 {
            let outcome = threshold_prune(&mut self.net, &mut self.prune, val_accuracy, |net| {
                crate::eval::accuracy(net, &self.val)
            })?;
            if outcome.applied {
                val_accuracy = outcome.post_accuracy;
                newly_masked = outcome.newly_masked;
            }
        }

        let val_entropy_bits = if self.cfg.analysis.enabled {
            Some(self.val_entropy()?)
        } else {
            None
        };

        self.epoch += 1;
        let log = EpochLog {
            epoch: self.epoch,
            train_loss,
            val_accuracy,
            sparsity: self.prune.sparsity(),
            val_entropy_bits,
            newly_masked,
        };

        let improved = self
            .best
            .as_ref()
            .map(|b| val_accuracy > b.val_accuracy)
            .unwrap_or(true);
        if improved {
            self.best = Some(BestSnapshot {
                epoch: self.epoch,
                val_accuracy,
                params: self.net.params.clone(),
                masks: self.prune.masks.clone(),
            });
        }
        Ok(log)
    }

    /// Dictionary entropy of the validation split at the configured K
    /// (auto selects on validation accuracy during training).
    fn val_entropy(&self) -> Result<f64> {
        let candidates = match self.cfg.analysis.k {
            KChoice::Fixed(k) => vec![k],
            KChoice::Auto => K_SWEEP.to_vec(),
        };
        let result = evaluate(
            &self.net,
            &self.val,
            &EvalOptions {
                k_candidates: candidates.clone(),
                collect_keys: true,
                aggregate_couplings: false,
            },
        )?;
        let slot = choose_k_slot(&self.cfg.analysis.k, &result);
        let dict = dictionary_from_eval(&result, slot, candidates[slot], self.net.dims().num_primary, self.net.config().num_classes)?;
        network_entropy(&dict)
    }
}

/// Index into the candidate list selected by the K policy: the smallest K
/// whose quantized accuracy is within 0.1 points of unquantized, or the
/// last candidate when none passes.
pub fn choose_k_slot(choice: &KChoice, result: &EvalResult) -> usize {
    match choice {
        KChoice::Fixed(_) => 0,
        KChoice::Auto => {
            for (slot, &(_, acc)) in result.quant_accuracy.iter().enumerate() {
                if acc >= result.accuracy - 0.001 {
                    return slot;
                }
            }
            result.quant_accuracy.len() - 1
        }
    }
}

/// Build the parse dictionary from collected per-sample keys.
pub fn dictionary_from_eval(
    result: &EvalResult,
    slot: usize,
    k: usize,
    num_primary: usize,
    num_classes: usize,
) -> Result<ParseDictionary> {
    let mut dict = ParseDictionary::new(k, num_primary, num_classes)?;
    for (sample_id, s) in result.samples.iter().enumerate() {
        let key = QuantizedKey {
            class_id: s.predicted,
            symbols: s.keys[slot].clone(),
        };
        dict.insert(&key, sample_id)?;
    }
    Ok(dict)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CapsNetConfig;
    use crate::routing::RoutingBackprop;

    fn small_cfg(seed: u64, lambda: f64, prune_on: bool) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.model = CapsNetConfig {
            input_shape: (1, 14, 14),
            conv1_channels: 4,
            conv1_kernel: 5,
            conv1_stride: 1,
            primary_types: 2,
            primary_dim: 4,
            primary_kernel: 5,
            primary_stride: 2,
            num_classes: 3,
            out_dim: 4,
            routing_iters: 2,
            routing_backprop: RoutingBackprop::LastIteration,
        };
        cfg.optimizer.seed = seed;
        cfg.optimizer.lambda = lambda;
        cfg.optimizer.batch = 8;
        cfg.optimizer.epochs = 1;
        cfg.prune.enabled = prune_on;
        cfg.data.source = "synth:classes=3,n_train=20,n_test=5,size=14,seed=4"
            .parse()
            .unwrap();
        cfg.data.augment_shift = 1;
        cfg
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let run = |seed| {
            let mut t = Trainer::new(small_cfg(seed, 0.0, false)).unwrap();
            let log = t.run_epoch().unwrap();
            (log.train_loss, log.val_accuracy, t.net.params.w.data().to_vec())
        };
        let (l1, a1, w1) = run(7);
        let (l2, a2, w2) = run(7);
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(a1.to_bits(), a2.to_bits());
        assert_eq!(w1, w2);
        let (_, _, w3) = run(8);
        assert_ne!(w1, w3);
    }

    #[test]
    fn zero_lambda_with_prune_enabled_matches_prune_disabled() {
        let mut cfg_on = small_cfg(3, 0.0, true);
        cfg_on.prune.threshold = 0.0;
        let cfg_off = small_cfg(3, 0.0, false);

        let mut a = Trainer::new(cfg_on).unwrap();
        let mut b = Trainer::new(cfg_off).unwrap();
        let la = a.run_epoch().unwrap();
        let lb = b.run_epoch().unwrap();
        assert_eq!(la.train_loss.to_bits(), lb.train_loss.to_bits());
        assert_eq!(a.net.params.w.data(), b.net.params.w.data());
        assert_eq!(a.net.params.conv1_kernels.data(), b.net.params.conv1_kernels.data());
        assert_eq!(la.sparsity, 0.0);
    }

    #[test]
    fn shrinkage_changes_the_trajectory() {
        let mut a = Trainer::new(small_cfg(5, 0.0, true)).unwrap();
        let mut b = Trainer::new(small_cfg(5, 0.01, true)).unwrap();
        a.run_epoch().unwrap();
        b.run_epoch().unwrap();
        assert_ne!(a.net.params.w.data(), b.net.params.w.data());
    }

    #[test]
    fn masked_weights_survive_an_epoch_at_zero() {
        let mut cfg = small_cfg(6, 0.001, true);
        cfg.prune.threshold = 0.0; // no new masking this epoch
        let mut t = Trainer::new(cfg).unwrap();
        // pre-mask a block of W by hand
        for i in 0..50 {
            t.prune.masks.get_mut("w").unwrap()[i] = false;
            t.net.params.w.data_mut()[i] = 0.0;
        }
        t.run_epoch().unwrap();
        for i in 0..50 {
            assert_eq!(t.net.params.w.data()[i], 0.0);
        }
        assert!(t.prune.sparsity() > 0.0);
    }
}
