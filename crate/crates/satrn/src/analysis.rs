//! Analytic parameter/FLOP accounting, self-attention rollout maps, and the
//! aspect-ratio report derived from the adaptive positional-encoding gates.
//!
//! FLOP conventions (stated in every report header): one multiply-add is two
//! FLOPs; convolutions and linears count their weight MACs plus one FLOP per
//! biased output element; relu costs 1 per element, sigmoid 4, softmax 5,
//! layer norm 8, residual adds 1, max pooling `kh*kw` per output element.
//! The decoder is costed at the teacher-forced length `max_len + 1`.

use crate::config::{FfVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pe::PeVariant;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub batch: usize,
    pub input_hw: (usize, usize),
}

impl CostReport {
    pub fn params_total(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn flops_total(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# input {}x{}, batch {}; 1 MAC = 2 FLOPs; bias 1/elem; relu 1, sigmoid 4, \
             softmax 5, layer_norm 8 per element; decoder at teacher-forced max_len+1",
            self.input_hw.0, self.input_hw.1, self.batch
        );
        let _ = writeln!(s, "name\tparams\tflops");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}", r.name, r.params, r.flops);
        }
        let _ = writeln!(s, "total\t{}\t{}", self.params_total(), self.flops_total());
        s
    }
}

/// Weight-MAC FLOPs of one convolution: `2*K*K*(Cin/groups)*Cout*OH*OW`.
pub fn conv_flops(k: usize, cin_per_group: usize, cout: usize, oh: usize, ow: usize) -> u64 {
    2 * (k * k * cin_per_group * cout * oh * ow) as u64
}

/// FLOPs of a linear layer applied at `positions` positions.
pub fn linear_flops(din: usize, dout: usize, positions: u64, bias: bool) -> u64 {
    2 * (din * dout) as u64 * positions + if bias { dout as u64 * positions } else { 0 }
}

fn ff_params(cfg: &ModelConfig) -> u64 {
    let d = cfg.dim as u64;
    let h = (cfg.dim * cfg.ff_mult) as u64;
    match cfg.ff {
        FfVariant::Pointwise => (h * d + h) + (d * h + d),
        FfVariant::Conv3 => (h * d * 9 + h) + (d * h * 9 + d),
        FfVariant::Conv3Single => (h * d * 9 + h) + (d * h + d),
        FfVariant::Separable => (h * d + h) + (h * 9 + h) + (d * h + d),
    }
}

fn ff_flops(cfg: &ModelConfig, l: u64) -> u64 {
    let d = cfg.dim;
    let h = cfg.dim * cfg.ff_mult;
    let (k1, k2) = match cfg.ff {
        FfVariant::Pointwise | FfVariant::Separable => (1, 1),
        FfVariant::Conv3 => (3, 3),
        FfVariant::Conv3Single => (3, 1),
    };
    let mut f = conv_flops(k1, d, h, 1, 1) * l + (h as u64) * l; // expand + bias
    f += h as u64 * l; // relu
    if cfg.ff == FfVariant::Separable {
        f += conv_flops(3, 1, h, 1, 1) * l + (h as u64) * l; // depthwise + bias
        f += h as u64 * l; // relu
    }
    f += conv_flops(k2, h, d, 1, 1) * l + (d as u64) * l; // project + bias
    f
}

/// Attention FLOPs for one multi-head call with `tq` queries over `tk`
/// sources: four projections, scaled logits, softmax, and the weighted sum.
fn attention_flops(cfg: &ModelConfig, tq: u64, tk: u64) -> u64 {
    let d = cfg.dim;
    let nh = cfg.heads as u64;
    let mut f = linear_flops(d, d, tq, false) * 2; // q and output projections
    f += linear_flops(d, d, tk, false) * 2; // k and v
    f += 2 * tq * tk * d as u64; // logits
    f += tq * tk * nh; // scale
    f += 5 * tq * tk * nh; // softmax
    f += 2 * tq * tk * d as u64; // weighted sum
    f
}

fn layer_norm_flops(cfg: &ModelConfig, positions: u64) -> u64 {
    8 * positions * cfg.dim as u64
}

/// Analytic parameter and FLOP accounting per submodule. `batch` scales the
/// FLOP column only; parameter counts are architecture constants.
pub fn cost_report(cfg: &ModelConfig, batch: usize) -> Result<CostReport> {
    cfg.validate()?;
    let vocab = cfg.vocab()?;
    let d = cfg.dim;
    let (h, w) = (cfg.height, cfg.width);
    let (fh, fw) = cfg.feature_hw();
    let l = (fh * fw) as u64;
    let t = (cfg.max_len + 1) as u64;
    let b = batch as u64;
    let mut rows = Vec::new();

    // shallow CNN: conv1 at full resolution, pooling, conv2 at the reduced
    // resolution implied by the downsampling schedule
    {
        let params = (d * cfg.cin * 9 + d + d * d * 9 + d) as u64;
        let mut f = conv_flops(3, cfg.cin, d, h, w) + (d * h * w) as u64; // conv1 + bias
        f += (d * h * w) as u64; // relu
        let (mut ch, mut cw) = (h / 2, w / 2);
        f += 4 * (d * ch * cw) as u64; // 2x2 pool
        let extra = if cfg.down_w == 4 { (cfg.down_h / 4).trailing_zeros() as usize } else { 0 };
        for _ in 0..extra {
            ch /= 2;
            f += 2 * (d * ch * cw) as u64; // 2x1 pool
        }
        f += conv_flops(3, d, d, ch, cw) + (d * ch * cw) as u64; // conv2 + bias
        f += (d * ch * cw) as u64; // relu
        if (cfg.down_h, cfg.down_w) != (2, 2) {
            ch /= 2;
            cw /= 2;
            f += 4 * (d * ch * cw) as u64; // final 2x2 pool
        }
        debug_assert_eq!((ch, cw), (fh, fw));
        rows.push(CostRow { name: "encoder.cnn".into(), params, flops: f * b });
    }

    // channelwise norm on the CNN output
    rows.push(CostRow {
        name: "encoder.norm_in".into(),
        params: 2 * d as u64,
        flops: layer_norm_flops(cfg, l) * b,
    });

    // positional encoding injection
    {
        let (params, mut f) = match cfg.pe {
            PeVariant::A2dpe => {
                let p = 4 * (d * cfg.pe_hidden) as u64;
                let mut f = (d as u64) * (l + 1); // global average pool
                f += 2 * (linear_flops(d, cfg.pe_hidden, 1, false)
                    + cfg.pe_hidden as u64 // relu
                    + linear_flops(cfg.pe_hidden, d, 1, false)
                    + 4 * d as u64); // sigmoid
                f += 3 * d as u64 * l; // gated table combination
                (p, f)
            }
            PeVariant::None => (0, 0),
            _ => (0, 0),
        };
        if cfg.pe != PeVariant::None {
            f += d as u64 * l; // add onto the feature map
        }
        rows.push(CostRow { name: "encoder.pe".into(), params, flops: f * b });
    }

    for i in 0..cfg.enc_layers {
        let params = 4 * (d * d) as u64 + 2 * (2 * d) as u64 + ff_params(cfg);
        let mut f = attention_flops(cfg, l, l);
        f += d as u64 * l; // residual
        f += layer_norm_flops(cfg, l);
        f += ff_flops(cfg, l);
        f += d as u64 * l; // residual
        f += layer_norm_flops(cfg, l);
        rows.push(CostRow { name: format!("encoder.block{i}"), params, flops: f * b });
    }

    {
        let params = (vocab.total_ids() * d) as u64;
        let f = 2 * t * d as u64; // embedding scale + position add
        rows.push(CostRow { name: "decoder.embed".into(), params, flops: f * b });
    }

    for i in 0..cfg.dec_layers {
        let ff_p = {
            let hid = (d * cfg.ff_mult) as u64;
            (d as u64 * hid + hid) + (hid * d as u64 + d as u64)
        };
        let params = 2 * 4 * (d * d) as u64 + 3 * (2 * d) as u64 + ff_p;
        let mut f = attention_flops(cfg, t, t) + cfg.heads as u64 * t * t; // self + mask add
        f += d as u64 * t; // residual
        f += layer_norm_flops(cfg, t);
        f += attention_flops(cfg, t, l); // cross
        f += d as u64 * t;
        f += layer_norm_flops(cfg, t);
        let hid = d * cfg.ff_mult;
        f += linear_flops(d, hid, t, true) + hid as u64 * t + linear_flops(hid, d, t, true);
        f += d as u64 * t;
        f += layer_norm_flops(cfg, t);
        rows.push(CostRow { name: format!("decoder.layer{i}"), params, flops: f * b });
    }

    {
        let v = vocab.n_classes();
        let params = (d * v + v) as u64;
        let f = linear_flops(d, v, t, true);
        rows.push(CostRow { name: "decoder.out".into(), params, flops: f * b });
    }

    Ok(CostReport { rows, batch, input_hw: (h, w) })
}

/// Closed-form trainable parameter count (FLOP column zeroed).
pub fn count_params(cfg: &ModelConfig) -> Result<u64> {
    Ok(cost_report(cfg, 1)?.params_total())
}

/// Total forward FLOPs for a batch of one at the configured input size.
pub fn count_flops(cfg: &ModelConfig) -> Result<u64> {
    Ok(cost_report(cfg, 1)?.flops_total())
}

/// Head-averaged self-attention matrices of each encoder layer, bottom-up,
/// for a single image.
pub fn encoder_attention_matrices<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
) -> Result<Vec<Vec<f64>>> {
    if image.shape()[0] != 1 {
        return Err(Error::Usage("attention analysis runs one image at a time".into()));
    }
    let mut fwd = model.start_forward(false, 0);
    let (_, attn) = model.encode(&mut fwd, image)?;
    let heads = model.cfg.heads;
    let mut out = Vec::with_capacity(attn.len());
    for var in attn {
        let tensor = fwd.g.value(var);
        let l = tensor.shape()[1];
        let mut avg = vec![0.0f64; l * l];
        for hd in 0..heads {
            let base = hd * l * l;
            for i in 0..l * l {
                avg[i] += tensor.data()[base + i].as_f64();
            }
        }
        let inv = 1.0 / heads as f64;
        avg.iter_mut().for_each(|v| *v *= inv);
        out.push(avg);
    }
    Ok(out)
}

/// Propagate a character ROI down through `depth` layers of head-averaged
/// self-attention. Returns `depth + 1` maps over the feature grid: the
/// normalized ROI itself, then one map per layer walked from the top.
pub fn attention_rollout<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    roi: &[bool],
    depth: usize,
) -> Result<Vec<Tensor<f64>>> {
    let (fh, fw) = model.cfg.feature_hw();
    let l = fh * fw;
    if roi.len() != l {
        return Err(Error::Usage(format!(
            "roi mask has {} cells, feature grid is {fh}x{fw}",
            roi.len()
        )));
    }
    let active = roi.iter().filter(|&&b| b).count();
    if active == 0 {
        return Err(Error::Usage("roi mask is empty".into()));
    }
    if depth > model.cfg.enc_layers {
        return Err(Error::Usage(format!(
            "depth {depth} exceeds the {} encoder layers",
            model.cfg.enc_layers
        )));
    }
    let mut dist: Vec<f64> =
        roi.iter().map(|&b| if b { 1.0 / active as f64 } else { 0.0 }).collect();
    let mut maps = Vec::with_capacity(depth + 1);
    let to_map = |d: &[f64]| Tensor::new(vec![fh, fw], d.to_vec()).unwrap();
    maps.push(to_map(&dist));
    if depth == 0 {
        return Ok(maps);
    }
    let layers = encoder_attention_matrices(model, image)?;
    for k in 1..=depth {
        let a = &layers[model.cfg.enc_layers - k];
        let mut next = vec![0.0f64; l];
        for (t, &dt) in dist.iter().enumerate() {
            if dt == 0.0 {
                continue;
            }
            let row = &a[t * l..(t + 1) * l];
            for (s, &w) in row.iter().enumerate() {
                next[s] += dt * w;
            }
        }
        let total: f64 = next.iter().sum();
        if total > 0.0 {
            next.iter_mut().for_each(|v| *v /= total);
        }
        maps.push(to_map(&next));
        dist = next;
    }
    Ok(maps)
}

/// `r = ||alpha||_1 / ||beta||_1` per image.
pub fn aspect_ratios<T: Scalar>(model: &Model<T>, images: &Tensor<T>) -> Result<Vec<f64>> {
    let (alpha, beta) = model.a2dpe_gates(images)?;
    let b = images.shape()[0];
    let d = model.cfg.dim;
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let l1 = |t: &Tensor<T>| -> f64 {
            t.data()[i * d..(i + 1) * d].iter().map(|v| v.as_f64().abs()).sum()
        };
        out.push(l1(&alpha) / l1(&beta));
    }
    Ok(out)
}

/// Aspect-ratio group; boundary values fall into the lower bucket.
pub fn aspect_bucket(r: f64) -> &'static str {
    if r <= 0.6 {
        "(0,0.6)"
    } else if r <= 0.8 {
        "(0.6,0.8)"
    } else {
        "(0.8,inf)"
    }
}

/// Min-max normalize a map to 8-bit pixels (constant maps become zeros).
pub fn heatmap_pixels(map: &Tensor<f64>) -> Vec<u8> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in map.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    map.data()
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect()
}

/// Raw map values as TSV rows.
pub fn heatmap_tsv(map: &Tensor<f64>) -> String {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut s = String::new();
    for y in 0..h {
        for x in 0..w {
            if x > 0 {
                s.push('\t');
            }
            let _ = write!(s, "{:.9e}", map.at(&[y, x]));
        }
        s.push('\n');
    }
    s
}
