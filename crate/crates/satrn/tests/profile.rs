// scratch: op-level timings at training shapes
use satrn::graph::Graph;
use satrn::tensor::Tensor;
use std::time::Instant;

fn t32(shape: &[usize], salt: usize) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| ((i * 2654435761 + salt * 7919) % 1000) as f32 / 500.0 - 1.0)
}

fn bench(name: &str, mut f: impl FnMut()) {
    f(); // warm
    let t0 = Instant::now();
    let n = 5;
    for _ in 0..n {
        f();
    }
    println!("{name}: {:?}", t0.elapsed() / n);
}

#[test]
fn op_timings() {
    // conv2 shape: [32,64,16,32] -> 64ch 3x3
    bench("conv2 fwd+bwd", || {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(t32(&[32, 64, 16, 32], 1), true);
        let w = g.leaf(t32(&[64, 64, 3, 3], 2), true);
        let b = g.leaf(t32(&[64], 3), true);
        let y = g.conv2d(x, w, Some(b), 1, 1, 1).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
    });
    bench("conv1 fwd+bwd (no dx)", || {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(t32(&[32, 1, 32, 64], 4), false);
        let w = g.leaf(t32(&[64, 1, 3, 3], 5), true);
        let b = g.leaf(t32(&[64], 6), true);
        let y = g.conv2d(x, w, Some(b), 1, 1, 1).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
    });
    // encoder projection: [32,128,64] x [64,64]
    bench("proj matmul fwd+bwd", || {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(t32(&[32, 128, 64], 7), true);
        let w = g.leaf(t32(&[64, 64], 8), true);
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
    });
    // attention logits: [128,128,16] x [128,16,128]
    bench("attn qk fwd+bwd", || {
        let mut g = Graph::<f32>::new();
        let q = g.leaf(t32(&[128, 128, 16], 9), true);
        let k = g.leaf(t32(&[128, 16, 128], 10), true);
        let y = g.matmul(q, k).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
    });
    // ff expand 1x1 conv: [32,64,8,16] -> 256
    bench("ff expand fwd+bwd", || {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(t32(&[32, 64, 8, 16], 11), true);
        let w = g.leaf(t32(&[256, 64, 1, 1], 12), true);
        let b = g.leaf(t32(&[256], 13), true);
        let y = g.conv2d(x, w, Some(b), 1, 0, 1).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
    });
    // depthwise: [32,256,8,16]
    bench("ff depthwise fwd+bwd", || {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(t32(&[32, 256, 8, 16], 14), true);
        let w = g.leaf(t32(&[256, 1, 3, 3], 15), true);
        let b = g.leaf(t32(&[256], 16), true);
        let y = g.conv2d(x, w, Some(b), 1, 1, 256).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
    });
    // softmax on attention weights
    bench("softmax fwd+bwd", || {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(t32(&[128, 128, 128], 17), true);
        let y = g.softmax(x, 2).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
    });
    // permutes in mha
    bench("permute fwd+bwd", || {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(t32(&[32, 128, 4, 16], 18), true);
        let y = g.permute(x, &[0, 2, 1, 3]).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
    });
    bench("layer_norm fwd+bwd", || {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(t32(&[32, 128, 64], 19), true);
        let gain = g.leaf(t32(&[64], 20), true);
        let bias = g.leaf(t32(&[64], 21), true);
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
    });
    bench("maxpool fwd+bwd", || {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(t32(&[32, 64, 32, 64], 22), true);
        let y = g.maxpool2d(x, (2, 2), (2, 2)).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
    });
    bench("dropout fwd+bwd", || {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f32>::new();
        let x = g.leaf(t32(&[128, 128, 128], 23), true);
        let y = g.dropout(x, 0.1, &mut rng).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
    });
}
