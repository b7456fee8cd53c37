//! Parameter updates with gradient-weighted shrinkage, hard-threshold
//! masking guarded by validation accuracy, and sparsity accounting.
//!
//! The update for each alive coordinate is
//! `theta <- theta - eta * G[g] - lambda * theta * relu(1 - |g|)`,
//! where `G` is the base optimizer transform (momentum SGD here) and the
//! shrinkage weight uses the raw gradient magnitude. Coordinates whose
//! mask bit is cleared stay exactly zero and receive no updates.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{CapsNet, CapsNetParams};
use crate::tensor::Tensor;

/// Names of the tensors subject to shrinkage and masking: transformation
/// matrices and conv kernels. Biases and the routing prior are excluded.
pub const PRUNABLE: [&str; 3] = ["conv1.kernels", "primary.kernels", "w"];

pub fn is_prunable(name: &str) -> bool {
    PRUNABLE.contains(&name)
}

/// Per-parameter binary masks plus the shrinkage hyperparameters.
#[derive(Debug, Clone)]
pub struct PruneState {
    pub lambda: f64,
    pub eta: f64,
    pub threshold: f64,
    /// Allowed validation-accuracy drop (fraction) when committing a mask.
    pub tolerance: f64,
    /// Mask per prunable tensor, true = alive.
    pub masks: BTreeMap<String, Vec<bool>>,
}

impl PruneState {
    pub fn new(
        params: &CapsNetParams,
        lambda: f64,
        eta: f64,
        threshold: f64,
        tolerance: f64,
    ) -> Result<Self> {
        validate_hyper(eta, lambda)?;
        if threshold < 0.0 {
            return Err(Error::Config("prune threshold must be nonnegative".into()));
        }
        let mut masks = BTreeMap::new();
        for (name, t) in params.named() {
            if is_prunable(name) {
                masks.insert(name.to_string(), vec![true; t.len()]);
            }
        }
        Ok(PruneState {
            lambda,
            eta,
            threshold,
            tolerance,
            masks,
        })
    }

    pub fn mask(&self, name: &str) -> Option<&[bool]> {
        self.masks.get(name).map(|m| m.as_slice())
    }

    /// Fraction of masked coordinates among all prunable parameters.
    pub fn sparsity(&self) -> f64 {
        let mut dead = 0usize;
        let mut total = 0usize;
        for mask in self.masks.values() {
            total += mask.len();
            dead += mask.iter().filter(|&&alive| !alive).count();
        }
        if total == 0 {
            0.0
        } else {
            dead as f64 / total as f64
        }
    }
}

fn validate_hyper(eta: f64, lambda: f64) -> Result<()> {
    if eta <= 0.0 {
        return Err(Error::Config(format!("learning rate eta must be positive, got {eta}")));
    }
    if lambda < 0.0 {
        return Err(Error::Config(format!("shrinkage lambda must be nonnegative, got {lambda}")));
    }
    if lambda >= 1.0 {
        return Err(Error::Config(format!(
            "shrinkage lambda must stay below 1 so it can never flip a sign, got {lambda}"
        )));
    }
    Ok(())
}

/// Aggregate sparsity over a set of prune states.
pub fn sparsity_report<'a>(states: impl IntoIterator<Item = &'a PruneState>) -> f64 {
    let mut dead = 0usize;
    let mut total = 0usize;
    for s in states {
        for mask in s.masks.values() {
            total += mask.len();
            dead += mask.iter().filter(|&&alive| !alive).count();
        }
    }
    if total == 0 {
        0.0
    } else {
        dead as f64 / total as f64
    }
}

/// One shrinkage update on a parameter tensor.
///
/// `grad_update` is the base-optimizer transform of the gradient (the
/// plain gradient for SGD, the velocity for momentum); the raw gradient
/// for the shrinkage weight is read from the tensor's own grad buffer.
/// Masked coordinates are pinned at zero.
pub fn lobster_step(
    theta: &mut Tensor,
    grad_update: &[f64],
    eta: f64,
    lambda: f64,
    mask: Option<&[bool]>,
) -> Result<()> {
    validate_hyper(eta, lambda)?;
    if grad_update.len() != theta.len() {
        return Err(Error::dimension(
            "lobster_step",
            format!("grad_update length {} vs parameter length {}", grad_update.len(), theta.len()),
        ));
    }
    if theta.grad().is_none() {
        return Err(Error::State("lobster_step needs a populated grad buffer".into()));
    }
    if let Some(m) = mask {
        if m.len() != theta.len() {
            return Err(Error::dimension(
                "lobster_step",
                format!("mask length {} vs parameter length {}", m.len(), theta.len()),
            ));
        }
    }
    let raw: Vec<f64> = theta.grad().unwrap().to_vec();
    let data = theta.data_mut();
    for i in 0..data.len() {
        if let Some(m) = mask {
            if !m[i] {
                data[i] = 0.0;
                continue;
            }
        }
        let t = data[i];
        let mut v = t - eta * grad_update[i];
        if lambda > 0.0 {
            let gate = (1.0 - raw[i].abs()).max(0.0);
            v -= lambda * t * gate;
        }
        data[i] = v;
    }
    Ok(())
}

/// Outcome of a threshold-masking attempt at an epoch boundary.
#[derive(Debug, Clone, Copy)]
pub struct PruneOutcome {
    pub applied: bool,
    pub newly_masked: usize,
    pub pre_accuracy: f64,
    pub post_accuracy: f64,
}

/// Zero every alive coordinate of the prunable tensors with
/// `|theta| < threshold` and clear its mask bit, keeping the change only
/// if validation accuracy stays within tolerance of `pre_accuracy`.
pub fn threshold_prune<F>(
    net: &mut CapsNet,
    state: &mut PruneState,
    pre_accuracy: f64,
    eval: F,
) -> Result<PruneOutcome>
where
    F: FnOnce(&CapsNet) -> Result<f64>,
{
    // gather candidates: (tensor name, index, previous value)
    let mut candidates: Vec<(String, usize, f64)> = Vec::new();
    for (name, t) in net.params.named() {
        let Some(mask) = state.masks.get(name) else { continue };
        for (i, &v) in t.data().iter().enumerate() {
            if mask[i] && v.abs() < state.threshold {
                candidates.push((name.to_string(), i, v));
            }
        }
    }
    if candidates.is_empty() {
        return Ok(PruneOutcome {
            applied: false,
            newly_masked: 0,
            pre_accuracy,
            post_accuracy: pre_accuracy,
        });
    }

    for (name, i, _) in &candidates {
        for (n, t) in net.params.named_mut() {
            if n == name {
                t.data_mut()[*i] = 0.0;
            }
        }
        state.masks.get_mut(name).expect("prunable")[*i] = false;
    }

    let post_accuracy = eval(&*net)?;
    if pre_accuracy - post_accuracy > state.tolerance {
        // revert this epoch's tentative masking
        for (name, i, v) in &candidates {
            for (n, t) in net.params.named_mut() {
                if n == name {
                    t.data_mut()[*i] = *v;
                }
            }
            state.masks.get_mut(name).expect("prunable")[*i] = true;
        }
        return Ok(PruneOutcome {
            applied: false,
            newly_masked: 0,
            pre_accuracy,
            post_accuracy,
        });
    }
    Ok(PruneOutcome {
        applied: true,
        newly_masked: candidates.len(),
        pre_accuracy,
        post_accuracy,
    })
}

/// Momentum buffers for the base optimizer, one per parameter tensor.
#[derive(Debug, Clone)]
pub struct Momentum {
    pub factor: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Momentum {
    pub fn new(params: &CapsNetParams, factor: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&factor) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {factor}")));
        }
        let mut velocity = BTreeMap::new();
        for (name, t) in params.named() {
            if name != "b_prior" {
                velocity.insert(name.to_string(), vec![0.0; t.len()]);
            }
        }
        Ok(Momentum { factor, velocity })
    }

    /// v <- mu * v + g; masked coordinates are held at zero velocity.
    /// Returns the updated velocity, the `G[g]` of the update rule.
    pub fn update(&mut self, name: &str, grad: &[f64], mask: Option<&[bool]>) -> &[f64] {
        let v = self.velocity.get_mut(name).expect("known parameter");
        debug_assert_eq!(v.len(), grad.len());
        for i in 0..v.len() {
            if mask.map(|m| !m[i]).unwrap_or(false) {
                v[i] = 0.0;
            } else {
                v[i] = self.factor * v[i] + grad[i];
            }
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn theta_with_grad(values: &[f64], grads: &[f64]) -> Tensor {
        let mut t = Tensor::from_vec(&[values.len()], values.to_vec()).unwrap();
        t.accumulate_grad(grads);
        t
    }

    #[test]
    fn large_gradient_disables_shrinkage() {
        let mut t = theta_with_grad(&[0.5], &[1.5]);
        lobster_step(&mut t, &[1.5], 0.1, 0.01, None).unwrap();
        let expect: f64 = 0.5 - 0.1 * 1.5;
        assert_eq!(t.data()[0].to_bits(), expect.to_bits());
    }

    #[test]
    fn zero_gradient_is_pure_shrinkage() {
        let mut t = theta_with_grad(&[0.5], &[0.0]);
        lobster_step(&mut t, &[0.0], 0.1, 0.01, None).unwrap();
        let expect: f64 = 0.5 - 0.01 * 0.5;
        assert_eq!(t.data()[0].to_bits(), expect.to_bits());
        assert!((t.data()[0] - 0.5 * (1.0 - 0.01)).abs() < 1e-15);
    }

    #[test]
    fn mixed_case_reproduces_expected_value() {
        let mut t = theta_with_grad(&[0.5], &[0.2]);
        lobster_step(&mut t, &[0.2], 0.1, 0.01, None).unwrap();
        let expect: f64 = 0.5 - 0.1 * 0.2 - 0.01 * 0.5 * (1.0 - 0.2);
        assert_eq!(t.data()[0].to_bits(), expect.to_bits());
        assert!((t.data()[0] - 0.476).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let mut t = theta_with_grad(&[0.5], &[0.0]);
        assert!(lobster_step(&mut t, &[0.0], 0.0, 0.01, None).is_err());
        assert!(lobster_step(&mut t, &[0.0], 0.1, -0.1, None).is_err());
        assert!(lobster_step(&mut t, &[0.0], 0.1, 1.0, None).is_err());
    }

    #[test]
    fn masked_coordinates_stay_zero_across_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 16;
        let mut t = Tensor::from_vec(&[n], (0..n).map(|i| 0.1 * i as f64).collect()).unwrap();
        let mut mask = vec![true; n];
        for i in (0..n).step_by(3) {
            mask[i] = false;
            t.data_mut()[i] = 0.0;
        }
        for _ in 0..100 {
            t.zero_grad();
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            t.accumulate_grad(&g);
            lobster_step(&mut t, &g, 0.05, 0.001, Some(&mask)).unwrap();
        }
        for i in 0..n {
            if !mask[i] {
                assert_eq!(t.data()[i], 0.0);
            } else {
                assert!(t.data()[i].is_finite());
            }
        }
    }

    #[test]
    fn shrinkage_never_flips_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let theta: f64 = rng.random_range(-2.0..2.0);
            let g: f64 = rng.random_range(-2.0..2.0);
            let lambda: f64 = rng.random_range(0.0..0.99);
            let mut t = theta_with_grad(&[theta], &[g]);
            // isolate the shrinkage term with a zero base update
            lobster_step(&mut t, &[0.0], 0.1, lambda, None).unwrap();
            let shrunk = t.data()[0];
            assert!(shrunk.abs() <= theta.abs() + 1e-15);
            if theta != 0.0 {
                assert!(shrunk * theta >= 0.0, "sign flipped: {theta} -> {shrunk}");
            }
        }
    }

    #[test]
    fn sparsity_counts_masked_fraction() {
        let cfg = crate::model::CapsNetConfig {
            input_shape: (1, 8, 8),
            conv1_channels: 2,
            conv1_kernel: 3,
            conv1_stride: 1,
            primary_types: 1,
            primary_dim: 4,
            primary_kernel: 3,
            primary_stride: 2,
            num_classes: 2,
            out_dim: 2,
            routing_iters: 1,
            routing_backprop: Default::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = CapsNetParams::init(&cfg, &mut rng).unwrap();
        let mut state = PruneState::new(&params, 0.001, 0.05, 1e-3, 0.002).unwrap();
        assert_eq!(state.sparsity(), 0.0);
        assert_eq!(sparsity_report([&state]), 0.0);

        let total: usize = state.masks.values().map(|m| m.len()).sum();
        let w_len = state.masks["w"].len();
        for b in state.masks.get_mut("w").unwrap().iter_mut().take(w_len / 2) {
            *b = false;
        }
        let expect = (w_len / 2) as f64 / total as f64;
        assert!((state.sparsity() - expect).abs() < 1e-15);

        for mask in state.masks.values_mut() {
            mask.iter_mut().for_each(|b| *b = false);
        }
        assert_eq!(state.sparsity(), 1.0);
    }

    #[test]
    fn threshold_prune_masks_small_weights_and_respects_guard() {
        let cfg = crate::model::CapsNetConfig {
            input_shape: (1, 8, 8),
            conv1_channels: 2,
            conv1_kernel: 3,
            conv1_stride: 1,
            primary_types: 1,
            primary_dim: 4,
            primary_kernel: 3,
            primary_stride: 2,
            num_classes: 2,
            out_dim: 2,
            routing_iters: 1,
            routing_backprop: Default::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = CapsNet::new(cfg, &mut rng).unwrap();
        let mut state = PruneState::new(&net.params, 0.001, 0.05, 1e-6, 0.002).unwrap();

        // nothing below threshold: unchanged
        let out = threshold_prune(&mut net, &mut state, 0.9, |_| Ok(0.9)).unwrap();
        assert!(!out.applied);
        assert_eq!(state.sparsity(), 0.0);

        // three known magnitudes, threshold catches two
        state.threshold = 1e-6;
        {
            let w = net.params.w.data_mut();
            w[0] = 0.5;
            w[1] = 1e-9;
            w[2] = -1e-9;
        }
        let out = threshold_prune(&mut net, &mut state, 0.9, |_| Ok(0.9)).unwrap();
        assert!(out.applied);
        assert_eq!(out.newly_masked, 2);
        assert_eq!(net.params.w.data()[1], 0.0);
        assert!(!state.masks["w"][1] && !state.masks["w"][2]);
        assert!(state.masks["w"][0]);

        // guard rejects when accuracy collapses; weights and mask revert
        state.threshold = 10.0;
        let before = net.params.w.data().to_vec();
        let sparsity_before = state.sparsity();
        let out = threshold_prune(&mut net, &mut state, 0.9, |_| Ok(0.1)).unwrap();
        assert!(!out.applied);
        assert_eq!(net.params.w.data(), before.as_slice());
        assert_eq!(state.sparsity(), sparsity_before);
    }
}
