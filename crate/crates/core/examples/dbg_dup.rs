// quick probe for the duplicate-gradient mismatch
use remcaps_core::model::*;
use remcaps_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = CapsNetConfig {
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
        routing_backprop: Default::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = CapsNet::new(cfg, &mut rng).unwrap();
    let image = Tensor::from_vec(&[1, 8, 8], (0..64).map(|i| ((i * 37) % 64) as f64 / 64.0).collect()).unwrap();

    let (t1, c1) = net.forward_cached(&image).unwrap();
    let mut g1 = ParamGrads::zeros_like(&net.params);
    net.backward_into(&t1, &c1, 1, &mut g1).unwrap();

    let (t2, c2) = net.forward_cached(&image).unwrap();
    let mut g2 = ParamGrads::zeros_like(&net.params);
    net.backward_into(&t2, &c2, 1, &mut g2).unwrap();

    let mut diffs = 0;
    for (i, (a, b)) in g1.w.iter().zip(&g2.w).enumerate() {
        if a.to_bits() != b.to_bits() {
            if diffs < 5 { println!("w[{i}]: {a:e} vs {b:e} (diff {:e})", a - b); }
            diffs += 1;
        }
    }
    println!("w diffs between two identical backwards: {diffs}");

    let mut batch = ParamGrads::zeros_like(&net.params);
    net.backward_into(&t1, &c1, 1, &mut batch).unwrap();
    net.backward_into(&t2, &c2, 1, &mut batch).unwrap();
    batch.scale(0.5);
    let mut diffs = 0;
    for (i, (a, b)) in batch.w.iter().zip(&g1.w).enumerate() {
        if a.to_bits() != b.to_bits() {
            if diffs < 5 { println!("batch w[{i}]: {a:e} vs single {b:e}"); }
            diffs += 1;
        }
    }
    println!("batch-mean vs single diffs: {diffs}");
}
