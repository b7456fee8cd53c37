//! The capsule network encoder: conv stem, primary capsules, output
//! capsules via dynamic routing, margin loss, and the manual backward
//! pass that fills the parameter gradient buffers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::{
    add_channel_bias, batched_matvec_backward, batched_matvec_raw, channel_bias_backward,
    conv2d, conv2d_backward, conv_out_extent, relu_backward_inplace, relu_inplace,
    squash_row_backward, squash_row_inplace,
};
use crate::routing::{routing_backward, routing_forward, RoutingBackprop, RoutingForward};
use crate::tensor::Tensor;

/// Margin-loss constants.
pub const M_PLUS: f64 = 0.9;
pub const M_MINUS: f64 = 0.1;
pub const MARGIN_LAMBDA: f64 = 0.5;

/// Architecture hyperparameters of the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapsNetConfig {
    /// Input as (channels, height, width).
    pub input_shape: (usize, usize, usize),
    pub conv1_channels: usize,
    pub conv1_kernel: usize,
    pub conv1_stride: usize,
    /// Primary capsule types T.
    pub primary_types: usize,
    /// Pose length of a primary capsule.
    pub primary_dim: usize,
    pub primary_kernel: usize,
    pub primary_stride: usize,
    /// Output capsules J, one per class.
    pub num_classes: usize,
    /// Pose length of an output capsule.
    pub out_dim: usize,
    /// Routing iterations t.
    pub routing_iters: usize,
    pub routing_backprop: RoutingBackprop,
}

/// Extents derived from the configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DerivedDims {
    pub conv1_h: usize,
    pub conv1_w: usize,
    /// Spatial extents of the primary capsule grid.
    pub primary_m: usize,
    pub primary_n: usize,
    /// Number of primary capsules I = T * M * N.
    pub num_primary: usize,
}

impl CapsNetConfig {
    /// Desk-scale default: a ~4x shrunk version of the standard MNIST
    /// encoder (64 conv channels, 8 capsule types, I = 288) that keeps
    /// every structural element.
    pub fn toy() -> Self {
        CapsNetConfig {
            input_shape: (1, 28, 28),
            conv1_channels: 64,
            conv1_kernel: 9,
            conv1_stride: 1,
            primary_types: 8,
            primary_dim: 8,
            primary_kernel: 9,
            primary_stride: 2,
            num_classes: 10,
            out_dim: 16,
            routing_iters: 3,
            routing_backprop: RoutingBackprop::LastIteration,
        }
    }

    pub fn derived(&self) -> Result<DerivedDims> {
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config("input shape has a zero extent".into()));
        }
        if self.routing_iters < 1 {
            return Err(Error::Config("routing_iters must be >= 1".into()));
        }
        if self.conv1_stride == 0 || self.primary_stride == 0 {
            return Err(Error::Config("strides must be >= 1".into()));
        }
        if self.conv1_kernel > h || self.conv1_kernel > w {
            return Err(Error::Config(format!(
                "conv1 kernel {} exceeds input {}x{}",
                self.conv1_kernel, h, w
            )));
        }
        let conv1_h = conv_out_extent(h, self.conv1_kernel, self.conv1_stride);
        let conv1_w = conv_out_extent(w, self.conv1_kernel, self.conv1_stride);
        if self.primary_kernel > conv1_h || self.primary_kernel > conv1_w {
            return Err(Error::Config(format!(
                "primary kernel {} exceeds conv1 output {}x{}",
                self.primary_kernel, conv1_h, conv1_w
            )));
        }
        let primary_m = conv_out_extent(conv1_h, self.primary_kernel, self.primary_stride);
        let primary_n = conv_out_extent(conv1_w, self.primary_kernel, self.primary_stride);
        let num_primary = self.primary_types * primary_m * primary_n;
        if num_primary == 0 {
            return Err(Error::Config("derived capsule count is zero".into()));
        }
        if self.num_classes == 0 || self.out_dim == 0 || self.primary_dim == 0 {
            return Err(Error::Config("capsule dimensions must be positive".into()));
        }
        Ok(DerivedDims {
            conv1_h,
            conv1_w,
            primary_m,
            primary_n,
            num_primary,
        })
    }
}

/// All learnable weights plus the routing prior logits.
#[derive(Debug, Clone)]
pub struct CapsNetParams {
    /// `[conv1_channels, C, k, k]`
    pub conv1_kernels: Tensor,
    /// `[conv1_channels]`
    pub conv1_bias: Tensor,
    /// `[T * primary_dim, conv1_channels, k, k]`
    pub primary_kernels: Tensor,
    /// `[T * primary_dim]`
    pub primary_bias: Tensor,
    /// Transformation matrices `[I, J, out_dim, primary_dim]`.
    pub w: Tensor,
    /// Initial routing logits `[I, J]`, all zeros and not learned.
    pub b_prior: Tensor,
}

impl CapsNetParams {
    /// Seeded initialization: conv kernels uniform in
    /// `±sqrt(6 / (fan_in + fan_out))`, transformation matrices normal
    /// with sigma 0.1, biases zero.
    pub fn init(config: &CapsNetConfig, rng: &mut impl Rng) -> Result<Self> {
        let dims = config.derived()?;
        let (c_in, _, _) = config.input_shape;
        let k1 = config.conv1_kernel;
        let kp = config.primary_kernel;
        let primary_channels = config.primary_types * config.primary_dim;

        let conv1_kernels = glorot_conv(
            &[config.conv1_channels, c_in, k1, k1],
            c_in * k1 * k1,
            config.conv1_channels * k1 * k1,
            rng,
        )?;
        let primary_kernels = glorot_conv(
            &[primary_channels, config.conv1_channels, kp, kp],
            config.conv1_channels * kp * kp,
            primary_channels * kp * kp,
            rng,
        )?;
        let normal = Normal::new(0.0, 0.1).expect("valid sigma");
        let w_len = dims.num_primary * config.num_classes * config.out_dim * config.primary_dim;
        let w_data: Vec<f64> = (0..w_len).map(|_| normal.sample(rng)).collect();
        let w = Tensor::from_vec(
            &[
                dims.num_primary,
                config.num_classes,
                config.out_dim,
                config.primary_dim,
            ],
            w_data,
        )?;

        Ok(CapsNetParams {
            conv1_kernels,
            conv1_bias: Tensor::zeros(&[config.conv1_channels]),
            primary_kernels,
            primary_bias: Tensor::zeros(&[primary_channels]),
            w,
            b_prior: Tensor::zeros(&[dims.num_primary, config.num_classes]),
        })
    }

    /// Parameter tensors in checkpoint order: (name, tensor).
    pub fn named(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("conv1.kernels", &self.conv1_kernels),
            ("conv1.bias", &self.conv1_bias),
            ("primary.kernels", &self.primary_kernels),
            ("primary.bias", &self.primary_bias),
            ("w", &self.w),
            ("b_prior", &self.b_prior),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 6] {
        [
            ("conv1.kernels", &mut self.conv1_kernels),
            ("conv1.bias", &mut self.conv1_bias),
            ("primary.kernels", &mut self.primary_kernels),
            ("primary.bias", &mut self.primary_bias),
            ("w", &mut self.w),
            ("b_prior", &mut self.b_prior),
        ]
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.named_mut() {
            t.zero_grad();
        }
    }
}

fn glorot_conv(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data)
}

/// Final-iteration routing state for one sample.
#[derive(Debug, Clone)]
pub struct RoutingTrace {
    /// Couplings `[I, J]` of the final routing pass.
    pub couplings: Tensor,
    /// Logits `[I, J]` that produced those couplings.
    pub logits: Tensor,
    /// Output poses `[J, out_dim]`.
    pub out_poses: Tensor,
    /// `|v_j|` per class.
    pub out_norms: Tensor,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    image: Tensor,
    conv1_pre: Vec<f64>,
    conv1_post: Tensor,
    u_pre: Vec<f64>,
    u: Vec<f64>,
    votes: Vec<f64>,
    routing: RoutingForward,
}

impl ForwardCache {
    pub fn votes(&self) -> &[f64] {
        &self.votes
    }

    pub fn final_couplings(&self) -> &[f64] {
        self.routing.final_couplings()
    }
}

/// Gradient buffers for the learnable parameters, used to merge
/// per-sample contributions in a fixed order.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub conv1_kernels: Vec<f64>,
    pub conv1_bias: Vec<f64>,
    pub primary_kernels: Vec<f64>,
    pub primary_bias: Vec<f64>,
    pub w: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_like(params: &CapsNetParams) -> Self {
        ParamGrads {
            conv1_kernels: vec![0.0; params.conv1_kernels.len()],
            conv1_bias: vec![0.0; params.conv1_bias.len()],
            primary_kernels: vec![0.0; params.primary_kernels.len()],
            primary_bias: vec![0.0; params.primary_bias.len()],
            w: vec![0.0; params.w.len()],
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.iter_mut_with(other) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for buf in self.buffers_mut() {
            for v in buf {
                *v *= factor;
            }
        }
    }

    pub fn buffers_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.conv1_kernels,
            &mut self.conv1_bias,
            &mut self.primary_kernels,
            &mut self.primary_bias,
            &mut self.w,
        ]
    }

    fn iter_mut_with<'a>(&'a mut self, other: &'a ParamGrads) -> [(&'a mut Vec<f64>, &'a [f64]); 5] {
        [
            (&mut self.conv1_kernels, other.conv1_kernels.as_slice()),
            (&mut self.conv1_bias, other.conv1_bias.as_slice()),
            (&mut self.primary_kernels, other.primary_kernels.as_slice()),
            (&mut self.primary_bias, other.primary_bias.as_slice()),
            (&mut self.w, other.w.as_slice()),
        ]
    }
}

/// The encoder: configuration, derived extents, and parameters.
#[derive(Debug, Clone)]
pub struct CapsNet {
    config: CapsNetConfig,
    dims: DerivedDims,
    pub params: CapsNetParams,
    last_forward: Option<(RoutingTrace, ForwardCache)>,
}

impl CapsNet {
    pub fn new(config: CapsNetConfig, rng: &mut impl Rng) -> Result<Self> {
        let dims = config.derived()?;
        let params = CapsNetParams::init(&config, rng)?;
        Ok(CapsNet {
            config,
            dims,
            params,
            last_forward: None,
        })
    }

    pub fn from_parts(config: CapsNetConfig, params: CapsNetParams) -> Result<Self> {
        let dims = config.derived()?;
        Ok(CapsNet {
            config,
            dims,
            params,
            last_forward: None,
        })
    }

    pub fn config(&self) -> &CapsNetConfig {
        &self.config
    }

    pub fn dims(&self) -> DerivedDims {
        self.dims
    }

    /// Forward pass for one `[C, H, W]` image with pixels in `[0, 1]`.
    pub fn forward(&self, image: &Tensor) -> Result<RoutingTrace> {
        Ok(self.forward_cached(image)?.0)
    }

    /// Forward pass keeping the activations needed by [`CapsNet::backward_into`].
    pub fn forward_cached(&self, image: &Tensor) -> Result<(RoutingTrace, ForwardCache)> {
        let (c, h, w) = self.config.input_shape;
        if image.shape() != [c, h, w] {
            return Err(Error::dimension(
                "forward",
                format!("image shape {:?} vs configured [{c}, {h}, {w}]", image.shape()),
            ));
        }
        let dims = self.dims;
        let nj = self.config.num_classes;
        let ni = dims.num_primary;
        let dp = self.config.primary_dim;
        let dout = self.config.out_dim;

        // conv stem
        let mut conv1 = conv2d(image, &self.params.conv1_kernels, self.config.conv1_stride)?;
        add_channel_bias(
            conv1.data_mut(),
            self.params.conv1_bias.data(),
            dims.conv1_h * dims.conv1_w,
        );
        let conv1_pre = conv1.data().to_vec();
        relu_inplace(conv1.data_mut());

        // primary capsules
        let mut primary = conv2d(&conv1, &self.params.primary_kernels, self.config.primary_stride)?;
        add_channel_bias(
            primary.data_mut(),
            self.params.primary_bias.data(),
            dims.primary_m * dims.primary_n,
        );

        // regroup [T*Dp, M, N] into poses [I, Dp], capsule index (type, m, n)
        let spatial = dims.primary_m * dims.primary_n;
        let mut u_pre = vec![0.0; ni * dp];
        for ty in 0..self.config.primary_types {
            for d in 0..dp {
                let plane = &primary.data()[(ty * dp + d) * spatial..(ty * dp + d + 1) * spatial];
                for (pos, &v) in plane.iter().enumerate() {
                    u_pre[(ty * spatial + pos) * dp + d] = v;
                }
            }
        }
        let mut u = u_pre.clone();
        for row in u.chunks_mut(dp) {
            squash_row_inplace(row);
        }

        // votes and routing
        let mut votes = vec![0.0; ni * nj * dout];
        batched_matvec_raw(self.params.w.data(), &u, ni, nj, dout, dp, &mut votes);
        let routing = routing_forward(
            &votes,
            self.params.b_prior.data(),
            ni,
            nj,
            dout,
            self.config.routing_iters,
        )?;

        let out_poses = Tensor::from_vec(&[nj, dout], routing.final_v().to_vec())?;
        let out_norms = Tensor::from_vec(
            &[nj],
            (0..nj)
                .map(|j| {
                    routing.final_v()[j * dout..(j + 1) * dout]
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt()
                })
                .collect(),
        )?;
        out_poses.check_finite("output poses")?;

        let trace = RoutingTrace {
            couplings: Tensor::from_vec(&[ni, nj], routing.final_couplings().to_vec())?,
            logits: Tensor::from_vec(&[ni, nj], routing.logits.clone())?,
            out_poses,
            out_norms,
        };
        let cache = ForwardCache {
            image: image.clone(),
            conv1_pre,
            conv1_post: conv1,
            u_pre,
            u,
            votes,
            routing,
        };
        Ok((trace, cache))
    }

    /// Stateful forward used with [`CapsNet::backward`].
    pub fn forward_train(&mut self, image: &Tensor) -> Result<&RoutingTrace> {
        let pair = self.forward_cached(image)?;
        self.last_forward = Some(pair);
        Ok(&self.last_forward.as_ref().unwrap().0)
    }

    /// Backward pass for the most recent [`CapsNet::forward_train`] call;
    /// accumulates into the parameter tensors' gradient buffers and
    /// returns the loss.
    pub fn backward(&mut self, target: usize) -> Result<f64> {
        let (trace, cache) = self
            .last_forward
            .take()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let mut grads = ParamGrads::zeros_like(&self.params);
        let loss = self.backward_into(&trace, &cache, target, &mut grads)?;
        self.params.conv1_kernels.accumulate_grad(&grads.conv1_kernels);
        self.params.conv1_bias.accumulate_grad(&grads.conv1_bias);
        self.params.primary_kernels.accumulate_grad(&grads.primary_kernels);
        self.params.primary_bias.accumulate_grad(&grads.primary_bias);
        self.params.w.accumulate_grad(&grads.w);
        Ok(loss)
    }

    /// Margin loss and parameter gradients for one sample, accumulated
    /// into `grads`. Pure in the model; safe to call from worker threads.
    pub fn backward_into(
        &self,
        trace: &RoutingTrace,
        cache: &ForwardCache,
        target: usize,
        grads: &mut ParamGrads,
    ) -> Result<f64> {
        let nj = self.config.num_classes;
        let ni = self.dims.num_primary;
        let dp = self.config.primary_dim;
        let dout = self.config.out_dim;
        let dims = self.dims;

        let loss = margin_loss(&trace.out_norms, target)?;
        let d_norms = margin_loss_backward(&trace.out_norms, target)?;

        // d|v| -> d v
        let mut d_v = vec![0.0; nj * dout];
        for j in 0..nj {
            let norm = trace.out_norms.data()[j];
            if norm > 0.0 && d_norms[j] != 0.0 {
                let scale = d_norms[j] / norm;
                let pose = &trace.out_poses.data()[j * dout..(j + 1) * dout];
                for (dv, &p) in d_v[j * dout..(j + 1) * dout].iter_mut().zip(pose) {
                    *dv = scale * p;
                }
            }
        }

        let d_votes = routing_backward(
            &cache.votes,
            &cache.routing,
            ni,
            nj,
            dout,
            &d_v,
            self.config.routing_backprop,
        );

        // votes = W u
        let mut d_u = vec![0.0; ni * dp];
        batched_matvec_backward(
            self.params.w.data(),
            &cache.u,
            ni,
            nj,
            dout,
            dp,
            &d_votes,
            &mut grads.w,
            Some(&mut d_u),
        );

        // u = squash(u_pre) per capsule
        let mut d_u_pre = vec![0.0; ni * dp];
        for i in 0..ni {
            squash_row_backward(
                &cache.u_pre[i * dp..(i + 1) * dp],
                &d_u[i * dp..(i + 1) * dp],
                &mut d_u_pre[i * dp..(i + 1) * dp],
            );
        }

        // regrouping back to [T*Dp, M, N]
        let spatial = dims.primary_m * dims.primary_n;
        let mut d_primary = vec![0.0; self.config.primary_types * dp * spatial];
        for ty in 0..self.config.primary_types {
            for d in 0..dp {
                let plane = &mut d_primary[(ty * dp + d) * spatial..(ty * dp + d + 1) * spatial];
                for (pos, dst) in plane.iter_mut().enumerate() {
                    *dst = d_u_pre[(ty * spatial + pos) * dp + d];
                }
            }
        }

        channel_bias_backward(&d_primary, spatial, &mut grads.primary_bias);
        let mut d_conv1 = vec![0.0; self.config.conv1_channels * dims.conv1_h * dims.conv1_w];
        conv2d_backward(
            &cache.conv1_post,
            &self.params.primary_kernels,
            self.config.primary_stride,
            &d_primary,
            Some(&mut d_conv1),
            &mut grads.primary_kernels,
        );

        relu_backward_inplace(&cache.conv1_pre, &mut d_conv1);
        channel_bias_backward(&d_conv1, dims.conv1_h * dims.conv1_w, &mut grads.conv1_bias);
        conv2d_backward(
            &cache.image,
            &self.params.conv1_kernels,
            self.config.conv1_stride,
            &d_conv1,
            None,
            &mut grads.conv1_kernels,
        );

        Ok(loss)
    }
}

/// Margin loss over output capsule norms for one target class.
pub fn margin_loss(out_norms: &Tensor, target: usize) -> Result<f64> {
    let nj = out_norms.len();
    if target >= nj {
        return Err(Error::Index {
            what: "target class",
            index: target,
            len: nj,
        });
    }
    let mut loss = 0.0;
    for (j, &x) in out_norms.data().iter().enumerate() {
        if j == target {
            let pos = (M_PLUS - x).max(0.0);
            loss += pos * pos;
        } else {
            let neg = (x - M_MINUS).max(0.0);
            loss += MARGIN_LAMBDA * neg * neg;
        }
    }
    Ok(loss)
}

/// d loss / d out_norms.
pub fn margin_loss_backward(out_norms: &Tensor, target: usize) -> Result<Vec<f64>> {
    let nj = out_norms.len();
    if target >= nj {
        return Err(Error::Index {
            what: "target class",
            index: target,
            len: nj,
        });
    }
    let mut d = vec![0.0; nj];
    for (j, &x) in out_norms.data().iter().enumerate() {
        if j == target {
            let pos = (M_PLUS - x).max(0.0);
            d[j] = -2.0 * pos;
        } else {
            let neg = (x - M_MINUS).max(0.0);
            d[j] = 2.0 * MARGIN_LAMBDA * neg;
        }
    }
    Ok(d)
}

/// Predicted class: argmax of the output norms, ties toward the smaller
/// index.
pub fn predict(trace: &RoutingTrace) -> usize {
    let mut best = 0;
    let mut best_norm = trace.out_norms.data()[0];
    for (j, &n) in trace.out_norms.data().iter().enumerate().skip(1) {
        if n > best_norm {
            best = j;
            best_norm = n;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> CapsNetConfig {
        CapsNetConfig {
            input_shape: (1, 8, 8),
            conv1_channels: 3,
            conv1_kernel: 3,
            conv1_stride: 1,
            primary_types: 2,
            primary_dim: 4,
            primary_kernel: 3,
            primary_stride: 2,
            num_classes: 2,
            out_dim: 3,
            routing_iters: 3,
            routing_backprop: RoutingBackprop::LastIteration,
        }
    }

    #[test]
    fn toy_config_derives_published_extents() {
        let dims = CapsNetConfig::toy().derived().unwrap();
        assert_eq!(dims.conv1_h, 20);
        assert_eq!(dims.primary_m, 6);
        assert_eq!(dims.num_primary, 288);
    }

    #[test]
    fn derived_rejects_zero_routing_iters() {
        let mut cfg = tiny_config();
        cfg.routing_iters = 0;
        assert!(cfg.derived().is_err());
    }

    #[test]
    fn zero_image_with_zero_bias_gives_uniform_couplings() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = CapsNet::new(cfg.clone(), &mut rng).unwrap();
        let image = Tensor::zeros(&[1, 8, 8]);
        let trace = net.forward(&image).unwrap();
        assert!(trace.out_norms.data().iter().all(|&n| n == 0.0));
        let j = cfg.num_classes as f64;
        for &c in trace.couplings.data() {
            assert!((c - 1.0 / j).abs() < 1e-15);
        }
    }

    #[test]
    fn single_routing_iteration_has_exactly_uniform_couplings() {
        let mut cfg = tiny_config();
        cfg.routing_iters = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = CapsNet::new(cfg.clone(), &mut rng).unwrap();
        let image = Tensor::from_vec(
            &[1, 8, 8],
            (0..64).map(|i| (i as f64) / 64.0).collect(),
        )
        .unwrap();
        let trace = net.forward(&image).unwrap();
        for &c in trace.couplings.data() {
            assert!((c - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_rejects_wrong_image_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = CapsNet::new(tiny_config(), &mut rng).unwrap();
        let image = Tensor::zeros(&[1, 9, 9]);
        assert!(matches!(
            net.forward(&image),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn margin_loss_at_the_margins_is_zero() {
        let norms = Tensor::from_vec(&[3], vec![0.1, 0.9, 0.1]).unwrap();
        assert_eq!(margin_loss(&norms, 1).unwrap(), 0.0);
    }

    #[test]
    fn margin_loss_all_zero_norms() {
        let norms = Tensor::zeros(&[10]);
        let loss = margin_loss(&norms, 3).unwrap();
        assert!((loss - 0.81).abs() < 1e-15);
    }

    #[test]
    fn margin_loss_all_high_norms() {
        let x = 1.0 - 1e-9;
        let norms = Tensor::from_vec(&[10], vec![x; 10]).unwrap();
        let loss = margin_loss(&norms, 0).unwrap();
        let expect = 0.5 * 9.0 * (x - 0.1) * (x - 0.1);
        assert!((loss - expect).abs() < 1e-12);
        assert!((loss - 3.645).abs() < 1e-7);
    }

    #[test]
    fn margin_loss_rejects_out_of_range_target() {
        let norms = Tensor::zeros(&[4]);
        assert!(matches!(
            margin_loss(&norms, 4),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn predict_takes_argmax_with_low_tie() {
        let mk = |norms: Vec<f64>| RoutingTrace {
            couplings: Tensor::zeros(&[1, norms.len()]),
            logits: Tensor::zeros(&[1, norms.len()]),
            out_poses: Tensor::zeros(&[norms.len(), 1]),
            out_norms: Tensor::from_vec(&[norms.len()], norms).unwrap(),
        };
        assert_eq!(predict(&mk(vec![0.1, 0.9])), 1);
        assert_eq!(predict(&mk(vec![0.4, 0.4, 0.4])), 0);
        // scale invariance of the argmax
        assert_eq!(predict(&mk(vec![0.2, 0.6, 0.3])), predict(&mk(vec![0.1, 0.3, 0.15])));
    }

    #[test]
    fn backward_without_forward_is_a_state_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = CapsNet::new(tiny_config(), &mut rng).unwrap();
        assert!(matches!(net.backward(0), Err(Error::State(_))));
    }

    #[test]
    fn zero_loss_zeroes_every_gradient() {
        // Push the target capsule norm above 0.9 and keep the other at 0:
        // both hinges are inactive, so the loss and all gradients vanish.
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = CapsNet::new(cfg, &mut rng).unwrap();
        {
            let w = net.params.w.data_mut();
            let dims_i = 8; // 2 types * 2x2 grid
            for i in 0..dims_i {
                for o in 0..3 {
                    for k in 0..4 {
                        // class 0: large aligned votes, class 1: zero votes
                        w[(((i * 2) * 3) + o) * 4 + k] = if o == 0 { 500.0 } else { 0.0 };
                        w[(((i * 2 + 1) * 3) + o) * 4 + k] = 0.0;
                    }
                }
            }
        }
        let image = Tensor::from_vec(&[1, 8, 8], vec![0.7; 64]).unwrap();
        let trace = net.forward_train(&image).unwrap();
        let norms = trace.out_norms.data().to_vec();
        assert!(norms[0] > 0.9, "engineered norm was {}", norms[0]);
        assert!(norms[1] <= 0.1);
        let loss = net.backward(0).unwrap();
        assert_eq!(loss, 0.0);
        for (name, t) in net.params.named() {
            if let Some(g) = t.grad() {
                assert!(g.iter().all(|&v| v == 0.0), "{name} has nonzero gradient");
            }
        }
    }

    #[test]
    fn duplicated_sample_mean_gradient_equals_single_gradient() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = CapsNet::new(cfg, &mut rng).unwrap();
        let image = Tensor::from_vec(
            &[1, 8, 8],
            (0..64).map(|i| ((i * 37) % 64) as f64 / 64.0).collect(),
        )
        .unwrap();

        let (trace, cache) = net.forward_cached(&image).unwrap();
        let mut single = ParamGrads::zeros_like(&net.params);
        net.backward_into(&trace, &cache, 1, &mut single).unwrap();

        let mut batch = ParamGrads::zeros_like(&net.params);
        for _ in 0..2 {
            let (t, c) = net.forward_cached(&image).unwrap();
            net.backward_into(&t, &c, 1, &mut batch).unwrap();
        }
        batch.scale(0.5);
        for (a, b) in batch.w.iter().zip(&single.w) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in batch.conv1_kernels.iter().zip(&single.conv1_kernels) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn couplings_are_row_stochastic_after_forward() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = CapsNet::new(cfg.clone(), &mut rng).unwrap();
        let mut img = vec![0.0; 64];
        for (i, v) in img.iter_mut().enumerate() {
            v.clone_from(&(((i * 13) % 29) as f64 / 29.0));
        }
        let image = Tensor::from_vec(&[1, 8, 8], img).unwrap();
        let trace = net.forward(&image).unwrap();
        for row in trace.couplings.data().chunks(cfg.num_classes) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert!(trace.out_norms.data().iter().all(|&n| n < 1.0));
    }
}
