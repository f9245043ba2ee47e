//! Shared finite-difference gradient suite (used by both the dedicated
//! gradcheck target and acceptance criterion 1).
//!
//! Finite-difference verification of every autodiff primitive and of the
//! composite blocks (shallow CNN, adaptive-PE gate path, encoder block with
//! each feedforward variant, decoder layer, full tiny model). All checks run
//! in f64 with central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use satrn::config::{FfVariant, ModelConfig};
use satrn::gradcheck::{assert_grads_match, FD_TOL};
use satrn::graph::{Graph, Var};
use satrn::model::Model;
use satrn::params::ParamId;
use satrn::pe::PeVariant;
use satrn::tensor::Tensor;
use satrn::vocab::teacher_forcing_batch;

/// Pseudo-random but deterministic test tensor with values in [-1, 1).
fn rt(shape: &[usize], salt: usize) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| {
        let x = (i * 2654435761 + salt * 40503) % 1000;
        x as f64 / 500.0 - 1.0
    })
}

/// Weighted sum of a node against a fixed sign-ish pattern, making every
/// output element contribute a distinct gradient.
fn project(g: &mut Graph<f64>, out: Var, salt: usize) -> Var {
    let shape = g.shape(out).to_vec();
    let weights = g.constant(rt(&shape, salt ^ 0xabcd));
    let prod = g.mul(out, weights).unwrap();
    g.sum(prod)
}

/// Gradient-check a graph computation against central differences.
fn check<F>(name: &str, inputs: Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let mut inputs = inputs;
    assert_grads_match(
        &mut inputs,
        &analytic,
        |ins| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), false)).collect();
            let loss = f(&mut g, &vars);
            g.value(loss).item()
        },
        name,
    );
}

pub fn matmul_grads() {
    check("matmul shared rhs", vec![rt(&[2, 3, 4], 1), rt(&[4, 5], 2)], |g, v| {
        let out = g.matmul(v[0], v[1]).unwrap();
        project(g, out, 3)
    });
    check("matmul batched rhs", vec![rt(&[2, 3, 4], 4), rt(&[2, 4, 5], 5)], |g, v| {
        let out = g.matmul(v[0], v[1]).unwrap();
        project(g, out, 6)
    });
}

pub fn conv2d_grads() {
    check(
        "conv2d stride 1 pad 1",
        vec![rt(&[2, 3, 5, 4], 7), rt(&[4, 3, 3, 3], 8), rt(&[4], 9)],
        |g, v| {
            let out = g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1).unwrap();
            project(g, out, 10)
        },
    );
    check(
        "conv2d stride 2",
        vec![rt(&[1, 2, 7, 7], 11), rt(&[3, 2, 3, 3], 12), rt(&[3], 13)],
        |g, v| {
            let out = g.conv2d(v[0], v[1], Some(v[2]), 2, 1, 1).unwrap();
            project(g, out, 14)
        },
    );
    check(
        "conv2d depthwise",
        vec![rt(&[2, 4, 5, 5], 15), rt(&[4, 1, 3, 3], 16), rt(&[4], 17)],
        |g, v| {
            let out = g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 4).unwrap();
            project(g, out, 18)
        },
    );
    check(
        "conv2d grouped",
        vec![rt(&[1, 4, 4, 4], 19), rt(&[6, 2, 3, 3], 20), rt(&[6], 21)],
        |g, v| {
            let out = g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 2).unwrap();
            project(g, out, 22)
        },
    );
}

pub fn pool_grads() {
    check("maxpool 2x2", vec![rt(&[2, 3, 6, 4], 23)], |g, v| {
        let out = g.maxpool2d(v[0], (2, 2), (2, 2)).unwrap();
        project(g, out, 24)
    });
    check("maxpool 2x1", vec![rt(&[1, 2, 6, 5], 25)], |g, v| {
        let out = g.maxpool2d(v[0], (2, 1), (2, 1)).unwrap();
        project(g, out, 26)
    });
    check("global_avg_pool", vec![rt(&[2, 3, 4, 5], 27)], |g, v| {
        let out = g.global_avg_pool(v[0]).unwrap();
        project(g, out, 28)
    });
}

pub fn pointwise_grads() {
    // relu's kink sits at 0; test values well away from it
    check("relu", vec![rt(&[3, 7], 29)], |g, v| {
        let out = g.relu(v[0]);
        project(g, out, 30)
    });
    check("sigmoid", vec![rt(&[4, 5], 31)], |g, v| {
        let out = g.sigmoid(v[0]);
        project(g, out, 32)
    });
    check("sin", vec![rt(&[6], 33)], |g, v| {
        let out = g.sin(v[0]);
        project(g, out, 34)
    });
    check("cos", vec![rt(&[6], 35)], |g, v| {
        let out = g.cos(v[0]);
        project(g, out, 36)
    });
    check("add", vec![rt(&[3, 4], 37), rt(&[3, 4], 38)], |g, v| {
        let out = g.add(v[0], v[1]).unwrap();
        project(g, out, 39)
    });
    check("add broadcast", vec![rt(&[3, 4], 40), rt(&[4], 41)], |g, v| {
        let out = g.add(v[0], v[1]).unwrap();
        project(g, out, 42)
    });
    check("mul", vec![rt(&[2, 6], 43), rt(&[2, 6], 44)], |g, v| {
        let out = g.mul(v[0], v[1]).unwrap();
        project(g, out, 45)
    });
    check("scale", vec![rt(&[5], 46)], |g, v| {
        let out = g.scale(v[0], -1.7);
        project(g, out, 47)
    });
}

pub fn normalization_grads() {
    check("softmax last axis", vec![rt(&[3, 6], 48)], |g, v| {
        let out = g.softmax(v[0], 1).unwrap();
        project(g, out, 49)
    });
    check("softmax inner axis", vec![rt(&[3, 4, 2], 50)], |g, v| {
        let out = g.softmax(v[0], 1).unwrap();
        project(g, out, 51)
    });
    check(
        "layer_norm",
        vec![rt(&[4, 6], 52), rt(&[6], 53), rt(&[6], 54)],
        |g, v| {
            let out = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            project(g, out, 55)
        },
    );
}

pub fn lookup_and_loss_grads() {
    check("embedding", vec![rt(&[5, 4], 56)], |g, v| {
        let out = g.embedding(v[0], &[2, 0, 4, 2]).unwrap();
        project(g, out, 57)
    });
    check("cross_entropy", vec![rt(&[6, 5], 58)], |g, v| {
        g.cross_entropy(v[0], &[0, 3, 2, 4, 1, 0], &[true, true, false, true, true, false])
            .unwrap()
    });
    check("pe_combine", vec![rt(&[2, 4], 59), rt(&[2, 4], 60)], |g, v| {
        let ph = satrn::pe::sinusoid_table::<f64>(3, 4).unwrap();
        let pw = satrn::pe::sinusoid_table::<f64>(5, 4).unwrap();
        let out = g.pe_combine(v[0], v[1], &ph, &pw).unwrap();
        project(g, out, 61)
    });
}

pub fn shape_op_grads() {
    check("permute + reshape", vec![rt(&[2, 3, 4], 62)], |g, v| {
        let p = g.permute(v[0], &[2, 0, 1]).unwrap();
        let r = g.reshape(p, vec![4, 6]).unwrap();
        project(g, r, 63)
    });
}

pub fn dropout_grads_with_fixed_mask() {
    check("dropout", vec![rt(&[4, 8], 64)], |g, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let out = g.dropout(v[0], 0.3, &mut rng).unwrap();
        project(g, out, 65)
    });
}

// ---- composite blocks through the real model ----

fn micro_cfg(pe: PeVariant, ff: FfVariant) -> ModelConfig {
    let mut cfg = ModelConfig::preset("tiny").unwrap();
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.pe_hidden = 4;
    cfg.height = 8;
    cfg.width = 8;
    cfg.max_len = 3;
    cfg.dropout = 0.0;
    cfg.pe = pe;
    cfg.ff = ff;
    cfg.validate().unwrap();
    cfg
}

/// Move every parameter to a generic point: zero-initialized biases otherwise
/// leave relu pre-activations sitting exactly on the kink, where the
/// subgradient convention and a central difference legitimately disagree.
fn jitter_params(model: &mut Model<f64>) {
    for i in 0..model.params.len() {
        let t = model.params.get_mut(ParamId(i));
        for (j, v) in t.data_mut().iter_mut().enumerate() {
            let x = (j * 2654435761 + i * 97003 + 17) % 1000;
            *v += (x as f64 / 500.0 - 1.0) * 0.05;
        }
    }
}

/// FD-check model parameters (filtered by name) against one backward pass.
fn model_check(
    mut model: Model<f64>,
    what: &str,
    filter: impl Fn(&str) -> bool,
    loss_fn: impl Fn(&Model<f64>) -> f64,
    analytic_fn: impl Fn(&mut Model<f64>),
) {
    model.params.zero_grads();
    analytic_fn(&mut model);
    let grads: Vec<Vec<f64>> = (0..model.params.len())
        .map(|i| model.params.get(ParamId(i)).grad.clone().unwrap())
        .collect();
    const H: f64 = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..model.params.len() {
        if !filter(model.params.name(ParamId(i))) {
            continue;
        }
        for j in 0..model.params.get(ParamId(i)).numel() {
            let orig = model.params.get(ParamId(i)).data()[j];
            model.params.get_mut(ParamId(i)).data_mut()[j] = orig + H;
            let up = loss_fn(&model);
            model.params.get_mut(ParamId(i)).data_mut()[j] = orig - H;
            let down = loss_fn(&model);
            model.params.get_mut(ParamId(i)).data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * H);
            let ad = grads[i][j];
            let err = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0);
            worst = worst.max(err);
        }
    }
    assert!(worst < FD_TOL, "{what}: max relative error {worst:.3e}");
    println!("gradcheck {what}: max relative error {worst:.3e}");
}

fn images(cfg: &ModelConfig) -> Tensor<f64> {
    Tensor::from_fn(&[2, cfg.cin, cfg.height, cfg.width], |i| {
        ((i * 131 % 97) as f64) / 97.0
    })
}

pub fn shallow_cnn_composite() {
    let cfg = micro_cfg(PeVariant::None, FfVariant::Separable);
    let mut model = Model::<f64>::build(cfg.clone()).unwrap();
    jitter_params(&mut model);
    let imgs = images(&cfg);
    let loss_fn = move |m: &Model<f64>| {
        let mut fwd = m.start_forward(false, 0);
        let img = fwd.g.constant(imgs.clone());
        let out = m.encoder.cnn.forward(&mut fwd, img).unwrap();
        let loss = project(&mut fwd.g, out, 70);
        fwd.g.value(loss).item()
    };
    let imgs2 = images(&cfg);
    model_check(
        model,
        "shallow CNN",
        |name| name.starts_with("encoder.cnn"),
        loss_fn,
        move |m| {
            let mut fwd = m.start_forward(false, 0);
            let img = fwd.g.constant(imgs2.clone());
            let out = m.encoder.cnn.forward(&mut fwd, img).unwrap();
            let loss = project(&mut fwd.g, out, 70);
            fwd.g.backward(loss).unwrap();
            fwd.read_grads_into(&mut m.params);
        },
    );
}

pub fn adaptive_pe_composite() {
    // gradient flows through the gates (pooled feature -> two perceptrons)
    // and through the feature map itself
    let cfg = micro_cfg(PeVariant::A2dpe, FfVariant::Pointwise);
    let mut model = Model::<f64>::build(cfg.clone()).unwrap();
    jitter_params(&mut model);
    let imgs = images(&cfg);
    let run = move |m: &Model<f64>, fwd: &mut satrn::layers::Forward<f64>| {
        let img = fwd.g.constant(imgs.clone());
        let feature = m.encoder.features(fwd, img).unwrap();
        let injected = m.encoder.pe.inject(fwd, feature).unwrap();
        project(&mut fwd.g, injected, 71)
    };
    let run2 = run.clone();
    model_check(
        model,
        "adaptive PE gate path",
        |name| {
            name.starts_with("encoder.pe")
                || name.starts_with("encoder.cnn")
                || name.starts_with("encoder.norm_in")
        },
        move |m| {
            let mut fwd = m.start_forward(false, 0);
            let loss = run(m, &mut fwd);
            fwd.g.value(loss).item()
        },
        move |m| {
            let mut fwd = m.start_forward(false, 0);
            let loss = run2(m, &mut fwd);
            fwd.g.backward(loss).unwrap();
            fwd.read_grads_into(&mut m.params);
        },
    );
}

fn encoder_block_check(ff: FfVariant, what: &str) {
    let cfg = micro_cfg(PeVariant::None, ff);
    let mut model = Model::<f64>::build(cfg.clone()).unwrap();
    jitter_params(&mut model);
    let imgs = images(&cfg);
    let run = move |m: &Model<f64>, fwd: &mut satrn::layers::Forward<f64>| {
        let img = fwd.g.constant(imgs.clone());
        let (out, _) = m.encoder.forward(fwd, img).unwrap();
        project(&mut fwd.g, out, 72)
    };
    let run2 = run.clone();
    model_check(
        model,
        what,
        |name| name.starts_with("encoder.block0"),
        move |m| {
            let mut fwd = m.start_forward(false, 0);
            let loss = run(m, &mut fwd);
            fwd.g.value(loss).item()
        },
        move |m| {
            let mut fwd = m.start_forward(false, 0);
            let loss = run2(m, &mut fwd);
            fwd.g.backward(loss).unwrap();
            fwd.read_grads_into(&mut m.params);
        },
    );
}

pub fn encoder_block_pointwise() {
    encoder_block_check(FfVariant::Pointwise, "encoder block (pointwise ff)");
}

pub fn encoder_block_conv3() {
    encoder_block_check(FfVariant::Conv3, "encoder block (conv3 ff)");
}

pub fn encoder_block_separable() {
    encoder_block_check(FfVariant::Separable, "encoder block (separable ff)");
}

fn full_model_loss(m: &Model<f64>, imgs: &Tensor<f64>, labels: &[Vec<u32>]) -> (f64, Option<()>) {
    let tokens = teacher_forcing_batch(&m.vocab, labels, m.cfg.max_len).unwrap();
    let mut fwd = m.start_forward(false, 0);
    let (grid, _) = m.encode(&mut fwd, imgs).unwrap();
    let (logits, _) = m
        .decode_teacher_forced(&mut fwd, grid, &tokens.inputs, tokens.batch, tokens.len)
        .unwrap();
    let loss = fwd.g.cross_entropy(logits, &tokens.targets, &tokens.mask).unwrap();
    (fwd.g.value(loss).item(), None)
}

fn full_model_backward(m: &mut Model<f64>, imgs: &Tensor<f64>, labels: &[Vec<u32>]) {
    let tokens = teacher_forcing_batch(&m.vocab, labels, m.cfg.max_len).unwrap();
    let mut fwd = m.start_forward(false, 0);
    let (grid, _) = m.encode(&mut fwd, imgs).unwrap();
    let (logits, _) = m
        .decode_teacher_forced(&mut fwd, grid, &tokens.inputs, tokens.batch, tokens.len)
        .unwrap();
    let loss = fwd.g.cross_entropy(logits, &tokens.targets, &tokens.mask).unwrap();
    fwd.g.backward(loss).unwrap();
    fwd.read_grads_into(&mut m.params);
}

fn full_model_check(pe: PeVariant, ff: FfVariant, what: &str, filter: impl Fn(&str) -> bool) {
    let cfg = micro_cfg(pe, ff);
    let mut model = Model::<f64>::build(cfg.clone()).unwrap();
    jitter_params(&mut model);
    let imgs = images(&cfg);
    let labels = vec![vec![1u32, 4, 0], vec![7, 2]];
    let labels2 = labels.clone();
    let imgs2 = imgs.clone();
    model_check(
        model,
        what,
        filter,
        move |m| full_model_loss(m, &imgs, &labels).0,
        move |m| full_model_backward(m, &imgs2, &labels2),
    );
}

pub fn decoder_layer_composite() {
    full_model_check(PeVariant::None, FfVariant::Pointwise, "decoder layer", |name| {
        name.starts_with("decoder.layer0")
    });
}

pub fn full_tiny_model_end_to_end() {
    full_model_check(PeVariant::A2dpe, FfVariant::Separable, "full tiny model", |_| true);
}
