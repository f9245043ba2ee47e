//! Training: Adam with bias correction, triangular cyclic learning rate,
//! rotation augmentation, teacher forcing, and sequence-accuracy evaluation.

use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::synth::{rotate_image, Dataset, Layout, SampleRec};
use crate::tensor::Tensor;
use crate::vocab::teacher_forcing_batch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub batch: usize,
    pub steps: u64,
    pub lr_max: f64,
    /// Half-period of the triangular schedule, in steps.
    pub cycle: u64,
    /// Rotation augmentation sigma in degrees; 0 disables the draw entirely.
    pub sigma_rot: f64,
    /// Evaluate every this many steps (0 = only at the end).
    pub eval_every: u64,
    pub seed: u64,
    /// Optional global-norm gradient clip.
    pub clip: Option<f64>,
    /// Interpret `lr_max` as a constant rate instead of a cycle peak.
    pub constant_lr: bool,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            batch: 32,
            steps: 6000,
            lr_max: 3e-4,
            cycle: 2000,
            sigma_rot: 34.0,
            eval_every: 0,
            seed: 0,
            clip: None,
            constant_lr: false,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.cycle < 2 {
            return Err(Error::Config("cycle must be >= 2 steps".into()));
        }
        if self.lr_max < 0.0 || self.sigma_rot < 0.0 {
            return Err(Error::Config("lr_max and sigma_rot must be >= 0".into()));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::Config("clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Triangular schedule: linear `lr_min -> lr_max` over `cycle` steps, back
/// down over the next `cycle`, repeating; `lr_min = lr_max / 100`.
pub fn cyclic_lr(step: u64, spec: &TrainSpec) -> f64 {
    if spec.constant_lr {
        return spec.lr_max;
    }
    let lr_min = spec.lr_max / 100.0;
    let period = 2 * spec.cycle;
    let phase = step % period;
    let frac = if phase <= spec.cycle {
        phase as f64 / spec.cycle as f64
    } else {
        (period - phase) as f64 / spec.cycle as f64
    };
    lr_min + (spec.lr_max - lr_min) * frac
}

/// Adam optimizer state (first/second moments per parameter tensor).
pub struct Adam<T: Scalar> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let m = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Adam { m, v, step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One update from the accumulated gradients; gradients are zeroed
    /// afterwards. Parameters are snapped back to f32-representable values.
    pub fn apply(&mut self, params: &mut ParamSet<T>, lr: f64) -> Result<()> {
        // reject non-finite gradients before touching any state
        for (name, t) in params.iter() {
            if let Some(g) = &t.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Data(format!(
                        "non-finite gradient in tensor {name:?}; step aborted"
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step;
        let bc1 = T::from_f64(1.0 - self.beta1.powi(t as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(t as i32));
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(self.eps);
        for i in 0..params.len() {
            let tensor = params.get_mut(ParamId(i));
            let Some(grad) = tensor.grad.take() else { continue };
            {
                let m = &mut self.m[i];
                let v = &mut self.v[i];
                let data = tensor.data_mut();
                for j in 0..grad.len() {
                    let g = grad[j];
                    m[j] = b1 * m[j] + one_m_b1 * g;
                    v[j] = b2 * v[j] + one_m_b2 * g * g;
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    data[j] = (data[j] - lr_t * mhat / (vhat.sqrt() + eps)).snap_f32();
                }
            }
            tensor.grad = Some(vec![T::zero(); grad.len()]);
        }
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm<T: Scalar>(params: &mut ParamSet<T>, max_norm: f64) {
    let mut sq = 0.0f64;
    for (_, t) in params.iter() {
        if let Some(g) = &t.grad {
            for &v in g {
                sq += v.as_f64() * v.as_f64();
            }
        }
    }
    let norm = sq.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return;
    }
    let scale = T::from_f64(max_norm / norm);
    for (_, t) in params.iter_mut() {
        if let Some(g) = &mut t.grad {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub eval_acc: Option<f64>,
}

pub fn metrics_to_tsv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("step\tlr\tloss\teval_acc\n");
    for r in rows {
        let acc = match r.eval_acc {
            Some(a) => format!("{a:.6}"),
            None => "-".to_string(),
        };
        let _ = writeln!(s, "{}\t{:.9e}\t{:.9e}\t{}", r.step, r.lr, r.loss, acc);
    }
    s
}

#[derive(Debug)]
pub struct TrainOutput {
    pub metrics: Vec<MetricsRow>,
    pub final_step: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Build an image batch tensor `[B, Cin, H, W]`, optionally rotating each
/// sample (bilinear, zero fill).
fn image_batch<T: Scalar>(
    recs: &[&SampleRec],
    h: usize,
    w: usize,
    cin: usize,
    thetas: Option<&[f64]>,
) -> Tensor<T> {
    let mut out = Tensor::<T>::zeros(&[recs.len(), cin, h, w]);
    let inv = 1.0 / 255.0;
    for (i, rec) in recs.iter().enumerate() {
        let mut plane: Vec<T> =
            rec.pixels.iter().map(|&p| T::from_f64(p as f64 * inv)).collect();
        if let Some(ts) = thetas {
            if ts[i] != 0.0 {
                plane = rotate_image(&plane, h, w, ts[i], T::zero());
            }
        }
        for c in 0..cin {
            let off = (i * cin + c) * h * w;
            out.data_mut()[off..off + h * w].copy_from_slice(&plane);
        }
    }
    out
}

/// End-to-end training. Writes the final checkpoint to `ckpt_path` when
/// given; on a non-finite loss the last-good parameters are saved there and
/// the error is returned.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    eval_data: Option<&Dataset>,
    spec: &TrainSpec,
    ckpt_path: Option<&Path>,
) -> Result<TrainOutput> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    if data.height != model.cfg.height || data.width != model.cfg.width {
        return Err(Error::Config(format!(
            "dataset images are {}x{}, model expects {}x{}",
            data.height, data.width, model.cfg.height, model.cfg.width
        )));
    }
    // encode all labels once; also validates them against the vocabulary
    let labels: Vec<Vec<u32>> = data
        .samples
        .iter()
        .map(|s| model.vocab.encode(&s.label))
        .collect::<Result<Vec<_>>>()?;

    let mut batch_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    batch_rng.set_stream(10);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    aug_rng.set_stream(11);
    let rot = if spec.sigma_rot > 0.0 {
        Some(Normal::new(0.0, spec.sigma_rot).expect("validated sigma"))
    } else {
        None
    };

    let mut adam = Adam::new(&model.params);
    let mut metrics = Vec::with_capacity(spec.steps as usize);
    let (h, w, cin) = (model.cfg.height, model.cfg.width, model.cfg.cin);
    // parameters of the most recent step whose loss was verified finite
    let mut last_good: Option<Vec<Vec<T>>> = None;

    for step in 0..spec.steps {
        let lr = cyclic_lr(step, spec);
        let idx: Vec<usize> =
            (0..spec.batch).map(|_| batch_rng.gen_range(0..data.len())).collect();
        let recs: Vec<&SampleRec> = idx.iter().map(|&i| &data.samples[i]).collect();
        let thetas: Option<Vec<f64>> =
            rot.map(|n| (0..recs.len()).map(|_| n.sample(&mut aug_rng)).collect());
        let images = image_batch::<T>(&recs, h, w, cin, thetas.as_deref());
        let batch_labels: Vec<Vec<u32>> = idx.iter().map(|&i| labels[i].clone()).collect();
        let tokens = teacher_forcing_batch(&model.vocab, &batch_labels, model.cfg.max_len)?;

        let mut fwd = model.start_forward(true, splitmix64(spec.seed ^ (step + 1)));
        let (grid, _) = model.encode(&mut fwd, &images)?;
        let (logits, _) =
            model.decode_teacher_forced(&mut fwd, grid, &tokens.inputs, tokens.batch, tokens.len)?;
        let loss = fwd.g.cross_entropy(logits, &tokens.targets, &tokens.mask)?;
        let loss_val = fwd.g.value(loss).item().as_f64();
        if !loss_val.is_finite() {
            // roll back to the last parameters with a verified-finite loss
            if let Some(good) = last_good {
                for (i, data) in good.into_iter().enumerate() {
                    model.params.get_mut(ParamId(i)).data_mut().copy_from_slice(&data);
                }
            }
            if let Some(path) = ckpt_path {
                save_checkpoint(path, &model.params, &model.cfg, step)?;
            }
            return Err(Error::Data(format!(
                "loss became non-finite at step {step}; last-good checkpoint saved"
            )));
        }
        last_good = Some(model.params.iter().map(|(_, t)| t.data().to_vec()).collect());
        fwd.g.backward(loss)?;
        fwd.read_grads_into(&mut model.params);
        drop(fwd);
        if let Some(c) = spec.clip {
            clip_global_norm(&mut model.params, c);
        }
        adam.apply(&mut model.params, lr)?;

        let eval_acc = if spec.eval_every > 0 && (step + 1) % spec.eval_every == 0 {
            match eval_data {
                Some(ed) => Some(evaluate(model, ed)?.accuracy()),
                None => None,
            }
        } else {
            None
        };
        metrics.push(MetricsRow { step, lr, loss: loss_val, eval_acc });
    }
    if let Some(ed) = eval_data {
        let acc = evaluate(model, ed)?.accuracy();
        if let Some(last) = metrics.last_mut() {
            last.eval_acc = Some(acc);
        }
    }
    if let Some(path) = ckpt_path {
        save_checkpoint(path, &model.params, &model.cfg, spec.steps)?;
    }
    Ok(TrainOutput { metrics, final_step: spec.steps })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub bucket: String,
    pub total: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("bucket\tn\tcorrect\taccuracy\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.6}",
                r.bucket,
                r.total,
                r.correct,
                r.correct as f64 / r.total as f64
            );
        }
        let _ = writeln!(s, "overall\t{}\t{}\t{:.6}", self.total, self.correct, self.accuracy());
        s
    }
}

/// Report bucket of a sample: `horizontal`, `multiline`, or `rotN` with the
/// angle rounded to the nearest multiple of 90 degrees.
pub fn layout_bucket(layout: &Layout) -> String {
    match layout {
        Layout::Horizontal => "horizontal".to_string(),
        Layout::Multiline => "multiline".to_string(),
        Layout::Rotated(theta) => {
            let k = ((theta.rem_euclid(360.0) / 90.0).round() as i64).rem_euclid(4);
            format!("rot{}", k * 90)
        }
    }
}

/// Exact-match evaluation with a pluggable decoder (tests substitute an
/// oracle that echoes labels).
pub fn evaluate_with<F>(data: &Dataset, mut decode: F) -> Result<EvalReport>
where
    F: FnMut(&[SampleRec]) -> Result<Vec<String>>,
{
    if data.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let mut rows: Vec<EvalRow> = Vec::new();
    let mut total = 0;
    let mut correct = 0;
    for chunk in data.samples.chunks(64) {
        let decoded = decode(chunk)?;
        if decoded.len() != chunk.len() {
            return Err(Error::Usage("decoder returned wrong batch size".into()));
        }
        for (rec, text) in chunk.iter().zip(decoded) {
            let bucket = layout_bucket(&rec.layout);
            let row = match rows.iter_mut().find(|r| r.bucket == bucket) {
                Some(r) => r,
                None => {
                    rows.push(EvalRow { bucket: bucket.clone(), total: 0, correct: 0 });
                    rows.last_mut().unwrap()
                }
            };
            let ok = text == rec.label;
            row.total += 1;
            row.correct += ok as usize;
            total += 1;
            correct += ok as usize;
        }
    }
    rows.sort_by(|a, b| a.bucket.cmp(&b.bucket));
    Ok(EvalReport { total, correct, rows })
}

/// Greedy-decode the whole dataset and score exact sequence matches.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<EvalReport> {
    if data.height != model.cfg.height || data.width != model.cfg.width {
        return Err(Error::Config(format!(
            "dataset images are {}x{}, model expects {}x{}",
            data.height, data.width, model.cfg.height, model.cfg.width
        )));
    }
    let (h, w, cin) = (model.cfg.height, model.cfg.width, model.cfg.cin);
    evaluate_with(data, |chunk| {
        let recs: Vec<&SampleRec> = chunk.iter().collect();
        let images = image_batch::<T>(&recs, h, w, cin, None);
        let out = model.greedy_decode(&images)?;
        Ok(out.ids.iter().map(|ids| model.vocab.decode(ids)).collect())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::synth::{generate, GenSpec, GlyphFont};

    fn micro_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::preset("tiny").unwrap();
        cfg.dim = 16;
        cfg.heads = 2;
        cfg.enc_layers = 1;
        cfg.dec_layers = 1;
        cfg.pe_hidden = 8;
        cfg.height = 16;
        cfg.width = 32;
        cfg.max_len = 4;
        cfg.dropout = 0.0;
        cfg.validate().unwrap();
        cfg
    }

    fn micro_data(count: usize) -> Dataset {
        let spec = GenSpec {
            count,
            height: 16,
            width: 32,
            len_min: 2,
            len_max: 2,
            noise: 0.0,
            scale: 2,
            ..GenSpec::default()
        };
        generate(&spec, &GlyphFont::digits()).unwrap()
    }

    #[test]
    fn cyclic_lr_peak_trough_period() {
        let spec = TrainSpec { lr_max: 3e-4, cycle: 100, ..TrainSpec::default() };
        let lr_min = spec.lr_max / 100.0;
        assert_eq!(cyclic_lr(0, &spec), lr_min);
        assert_eq!(cyclic_lr(100, &spec), 3e-4);
        assert_eq!(cyclic_lr(200, &spec), lr_min);
        assert_eq!(cyclic_lr(50, &spec), lr_min + (spec.lr_max - lr_min) * 0.5);
        for k in [3u64, 17, 42, 123, 999] {
            assert_eq!(cyclic_lr(k, &spec), cyclic_lr(k + 200, &spec));
        }
        let c = TrainSpec { constant_lr: true, lr_max: 1e-3, ..spec };
        assert_eq!(cyclic_lr(0, &c), 1e-3);
        assert_eq!(cyclic_lr(12345, &c), 1e-3);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let model = Model::<f64>::build(micro_cfg()).unwrap();
        let mut params = model.params.clone();
        params.zero_grads();
        let before: Vec<Vec<f64>> = params.iter().map(|(_, t)| t.data().to_vec()).collect();
        let mut adam = Adam::new(&params);
        adam.apply(&mut params, 1e-3).unwrap();
        for ((_, t), b) in params.iter().zip(&before) {
            assert_eq!(t.data(), &b[..]);
        }
    }

    #[test]
    fn adam_single_step_matches_hand_oracle() {
        // one scalar parameter, gradient 1, t = 1:
        // m = 0.1, v = 0.001, mhat = 1, vhat = 1 -> update = -lr / (1 + eps)
        let mut b = crate::params::ParamBuilder::<f64>::random(0);
        let id = b.zeros("p".into(), &[1]).unwrap();
        let mut params = b.finish().unwrap();
        params.get_mut(id).grad = Some(vec![1.0]);
        let mut adam = Adam::new(&params);
        let lr = 0.01;
        adam.apply(&mut params, lr).unwrap();
        let expect = -(lr / (1.0 + 1e-8)) as f32 as f64; // params snap to f32
        assert_eq!(params.get(id).data()[0], expect);
        // gradient was zeroed
        assert!(params.get(id).grad.as_ref().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn identical_tensors_evolve_identically() {
        let mut b = crate::params::ParamBuilder::<f64>::random(0);
        let a = b.zeros("a".into(), &[4]).unwrap();
        let c = b.zeros("c".into(), &[4]).unwrap();
        let mut params = b.finish().unwrap();
        for step in 0..5 {
            let g: Vec<f64> = (0..4).map(|i| (i as f64 + step as f64) * 0.3 - 1.0).collect();
            params.get_mut(a).grad = Some(g.clone());
            params.get_mut(c).grad = Some(g);
            let mut adam = Adam::new(&params);
            adam.apply(&mut params, 1e-2).unwrap();
        }
        assert_eq!(params.get(a).data(), params.get(c).data());
    }

    #[test]
    fn adam_rejects_non_finite_grad_by_name() {
        let mut b = crate::params::ParamBuilder::<f64>::random(0);
        let id = b.zeros("w.bad".into(), &[2]).unwrap();
        let mut params = b.finish().unwrap();
        params.get_mut(id).grad = Some(vec![1.0, f64::NAN]);
        let mut adam = Adam::new(&params);
        let err = adam.apply(&mut params, 1e-3).unwrap_err().to_string();
        assert!(err.contains("w.bad"), "{err}");
    }

    #[test]
    fn zero_lr_training_keeps_params_bit_identical() {
        let mut model = Model::<f64>::build(micro_cfg()).unwrap();
        let before: Vec<Vec<f64>> = model.params.iter().map(|(_, t)| t.data().to_vec()).collect();
        let data = micro_data(8);
        let spec = TrainSpec {
            batch: 4,
            steps: 3,
            lr_max: 0.0,
            cycle: 2,
            sigma_rot: 0.0,
            ..TrainSpec::default()
        };
        train(&mut model, &data, None, &spec, None).unwrap();
        for ((_, t), b) in model.params.iter().zip(&before) {
            assert_eq!(t.data(), &b[..]);
        }
    }

    #[test]
    fn fresh_model_loss_near_log_vocab() {
        let mut model = Model::<f64>::build(micro_cfg()).unwrap();
        let data = micro_data(8);
        let spec = TrainSpec {
            batch: 8,
            steps: 1,
            lr_max: 0.0,
            cycle: 2,
            sigma_rot: 0.0,
            ..TrainSpec::default()
        };
        let out = train(&mut model, &data, None, &spec, None).unwrap();
        let expected = (model.vocab.n_classes() as f64).ln();
        let loss = out.metrics[0].loss;
        assert!(
            (loss - expected).abs() / expected < 0.10,
            "first-batch loss {loss} vs ln V {expected}"
        );
    }

    #[test]
    fn training_is_reproducible() {
        let data = micro_data(16);
        let spec = TrainSpec {
            batch: 4,
            steps: 4,
            lr_max: 1e-3,
            cycle: 2,
            sigma_rot: 10.0,
            ..TrainSpec::default()
        };
        let mut m1 = Model::<f64>::build(micro_cfg()).unwrap();
        let out1 = train(&mut m1, &data, None, &spec, None).unwrap();
        let mut m2 = Model::<f64>::build(micro_cfg()).unwrap();
        let out2 = train(&mut m2, &data, None, &spec, None).unwrap();
        assert_eq!(metrics_to_tsv(&out1.metrics), metrics_to_tsv(&out2.metrics));
        for ((_, a), (_, b)) in m1.params.iter().zip(m2.params.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn single_batch_overfit_decreases_loss() {
        let mut model = Model::<f64>::build(micro_cfg()).unwrap();
        let data = micro_data(4);
        let spec = TrainSpec {
            batch: 4,
            steps: 50,
            lr_max: 3e-3,
            cycle: 25,
            sigma_rot: 0.0,
            ..TrainSpec::default()
        };
        let out = train(&mut model, &data, None, &spec, None).unwrap();
        let first = out.metrics.first().unwrap().loss;
        let last = out.metrics.last().unwrap().loss;
        assert!(
            last < first,
            "loss did not decrease within 50 steps: {first} -> {last}"
        );
    }

    #[test]
    fn echo_decoder_scores_perfectly_and_rows_sum() {
        let mut data = micro_data(10);
        // give the layout field some variety for the breakdown
        data.samples[0].layout = Layout::Rotated(89.0);
        data.samples[1].layout = Layout::Rotated(271.3);
        data.samples[2].layout = Layout::Multiline;
        let report =
            evaluate_with(&data, |chunk| Ok(chunk.iter().map(|s| s.label.clone()).collect()))
                .unwrap();
        assert_eq!(report.accuracy(), 1.0);
        let row_total: usize = report.rows.iter().map(|r| r.total).sum();
        let row_correct: usize = report.rows.iter().map(|r| r.correct).sum();
        assert_eq!(row_total, report.total);
        assert_eq!(row_correct, report.correct);
        assert!(report.rows.iter().any(|r| r.bucket == "rot90"));
        assert!(report.rows.iter().any(|r| r.bucket == "rot270"));
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let model = Model::<f64>::build(micro_cfg()).unwrap();
        let data = micro_data(64);
        let report = evaluate(&model, &data).unwrap();
        // 2-digit labels: chance is 1%; an untrained model may sit at zero
        assert!(report.accuracy() <= 0.05, "accuracy {}", report.accuracy());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let data = Dataset { height: 16, width: 32, samples: vec![] };
        assert!(matches!(
            evaluate_with(&data, |_| Ok(vec![])),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn non_finite_loss_saves_last_good_checkpoint() {
        // an absurd learning rate overflows f32 activations one step after a
        // verified-finite step; the run must abort and leave a loadable,
        // finite checkpoint of the last good parameters
        let mut model = Model::<f32>::build(micro_cfg()).unwrap();
        let init: Vec<Vec<f32>> = model.params.iter().map(|(_, t)| t.data().to_vec()).collect();
        let data = micro_data(8);
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("abort.ckpt");
        let spec = TrainSpec {
            batch: 8,
            steps: 50,
            lr_max: 1e12,
            cycle: 2,
            sigma_rot: 0.0,
            constant_lr: true,
            ..TrainSpec::default()
        };
        let err = train(&mut model, &data, None, &spec, Some(&ckpt));
        match err {
            Err(Error::Data(msg)) => {
                assert!(msg.contains("non-finite"), "{msg}");
                // the saved state is the most recent one whose loss was
                // verified finite, so it loads cleanly and contains no NaNs
                let (loaded, _) = crate::checkpoint::load_model::<f32>(&ckpt).unwrap();
                assert!(loaded.params.iter().all(|(_, t)| t.all_finite()));
                assert_eq!(loaded.params.len(), init.len());
            }
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn augmentation_never_alters_labels() {
        // labels feed from the dataset record, untouched by the image path;
        // train with heavy rotation and confirm loss stays finite and labels
        // unchanged in the dataset
        let mut model = Model::<f64>::build(micro_cfg()).unwrap();
        let data = micro_data(8);
        let labels: Vec<String> = data.samples.iter().map(|s| s.label.clone()).collect();
        let spec = TrainSpec {
            batch: 4,
            steps: 2,
            lr_max: 1e-3,
            cycle: 2,
            sigma_rot: 90.0,
            ..TrainSpec::default()
        };
        train(&mut model, &data, None, &spec, None).unwrap();
        for (s, l) in data.samples.iter().zip(&labels) {
            assert_eq!(&s.label, l);
        }
    }
}
