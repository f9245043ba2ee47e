//! Sinusoidal position tables and the positional-encoding variants injected
//! at the encoder input: none, a 1D table over the flattened grid, a
//! height/width concatenation, and the adaptive gated sum whose height and
//! width scales are inferred from the input feature map.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `[L, D]` table with `sin(p / 10000^(2i/D))` in even columns and the
/// matching cosine in odd columns.
pub fn sinusoid_table<T: Scalar>(len: usize, dim: usize) -> Result<Tensor<T>> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!("sinusoid table needs an even dim, got {dim}")));
    }
    if len == 0 {
        return Err(Error::Config("sinusoid table needs len >= 1".into()));
    }
    let mut data = vec![T::zero(); len * dim];
    for p in 0..len {
        for i in 0..dim / 2 {
            let rate = (p as f64) / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[p * dim + 2 * i] = T::from_f64(rate.sin());
            data[p * dim + 2 * i + 1] = T::from_f64(rate.cos());
        }
    }
    Tensor::new(vec![len, dim], data)
}

/// Positional encoding scheme at the encoder input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeVariant {
    None,
    Flat1d,
    Concat2d,
    A2dpe,
}

impl PeVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PeVariant::None),
            "flat_1d" => Ok(PeVariant::Flat1d),
            "concat_2d" => Ok(PeVariant::Concat2d),
            "a2dpe" => Ok(PeVariant::A2dpe),
            _ => Err(Error::Config(format!(
                "unknown positional encoding {s:?} (expected none|flat_1d|concat_2d|a2dpe)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PeVariant::None => "none",
            PeVariant::Flat1d => "flat_1d",
            PeVariant::Concat2d => "concat_2d",
            PeVariant::A2dpe => "a2dpe",
        }
    }
}

/// Input-independent encoding grid `[D, H, W]` for the fixed variants.
/// `None` yields zeros; the adaptive variant has no fixed grid.
pub fn fixed_pe_grid<T: Scalar>(variant: PeVariant, h: usize, w: usize, dim: usize) -> Result<Tensor<T>> {
    match variant {
        PeVariant::None => Ok(Tensor::zeros(&[dim, h, w])),
        PeVariant::Flat1d => {
            let table = sinusoid_table::<T>(h * w, dim)?;
            let mut out = Tensor::zeros(&[dim, h, w]);
            for d in 0..dim {
                for y in 0..h {
                    for x in 0..w {
                        out.data_mut()[(d * h + y) * w + x] = table.data()[(y * w + x) * dim + d];
                    }
                }
            }
            Ok(out)
        }
        PeVariant::Concat2d => {
            if dim % 4 != 0 {
                return Err(Error::Config(format!(
                    "concat_2d needs dim divisible by 4, got {dim}"
                )));
            }
            let half = dim / 2;
            let th = sinusoid_table::<T>(h, half)?;
            let tw = sinusoid_table::<T>(w, half)?;
            let mut out = Tensor::zeros(&[dim, h, w]);
            for d in 0..dim {
                for y in 0..h {
                    for x in 0..w {
                        let v = if d < half {
                            th.data()[y * half + d]
                        } else {
                            tw.data()[x * half + (d - half)]
                        };
                        out.data_mut()[(d * h + y) * w + x] = v;
                    }
                }
            }
            Ok(out)
        }
        PeVariant::A2dpe => Err(Error::Usage(
            "the adaptive variant depends on the input; use the gated path".into(),
        )),
    }
}

/// Weights of the two gate perceptrons (height and width).
#[derive(Debug, Clone)]
pub struct GateParams<T: Scalar> {
    pub w1_h: Tensor<T>,
    pub w2_h: Tensor<T>,
    pub w1_w: Tensor<T>,
    pub w2_w: Tensor<T>,
}

/// Gate computation as graph ops: `sigmoid(relu(gap(E)·W1)·W2)` per axis.
/// Returns `(alpha, beta)`, each `[B, D]`.
pub fn gates_in_graph<T: Scalar>(
    g: &mut Graph<T>,
    feature: Var,
    w1_h: Var,
    w2_h: Var,
    w1_w: Var,
    w2_w: Var,
) -> Result<(Var, Var)> {
    let pooled = g.global_avg_pool(feature)?;
    let gate = |g: &mut Graph<T>, w1: Var, w2: Var| -> Result<Var> {
        let h = g.matmul(pooled, w1)?;
        let h = g.relu(h);
        let h = g.matmul(h, w2)?;
        Ok(g.sigmoid(h))
    };
    let alpha = gate(g, w1_h, w2_h)?;
    let beta = gate(g, w1_w, w2_w)?;
    Ok((alpha, beta))
}

/// Plain-tensor gate evaluation (no gradients), used by the analysis tools.
pub fn a2dpe_scales<T: Scalar>(
    feature: &Tensor<T>,
    params: &GateParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let e = g.constant(feature.clone());
    let w1h = g.constant(params.w1_h.clone());
    let w2h = g.constant(params.w2_h.clone());
    let w1w = g.constant(params.w1_w.clone());
    let w2w = g.constant(params.w2_w.clone());
    let (a, b) = gates_in_graph(&mut g, e, w1h, w2h, w1w, w2w)?;
    Ok((g.value(a).clone(), g.value(b).clone()))
}

/// Spec-level one-shot builder: the encoding tensor for a variant.
/// Fixed variants give `[1, D, H, W]`; the adaptive variant needs the feature
/// map and gate weights and gives `[B, D, H, W]`.
pub fn build_pe<T: Scalar>(
    variant: PeVariant,
    h: usize,
    w: usize,
    dim: usize,
    feature: Option<&Tensor<T>>,
    params: Option<&GateParams<T>>,
) -> Result<Tensor<T>> {
    match variant {
        PeVariant::A2dpe => {
            let (feature, params) = match (feature, params) {
                (Some(f), Some(p)) => (f, p),
                _ => {
                    return Err(Error::Usage(
                        "a2dpe needs the input feature map and gate weights".into(),
                    ))
                }
            };
            let (alpha, beta) = a2dpe_scales(feature, params)?;
            let ph = sinusoid_table::<T>(h, dim)?;
            let pw = sinusoid_table::<T>(w, dim)?;
            let mut g = Graph::new();
            let a = g.constant(alpha);
            let b = g.constant(beta);
            let out = g.pe_combine(a, b, &ph, &pw)?;
            Ok(g.value(out).clone())
        }
        fixed => {
            let grid = fixed_pe_grid::<T>(fixed, h, w, dim)?;
            grid.reshaped(vec![1, dim, h, w])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_first_rows() {
        let t = sinusoid_table::<f64>(3, 6).unwrap();
        // p = 0: sin 0 in even columns, cos 0 in odd columns
        for i in 0..3 {
            assert_eq!(t.at(&[0, 2 * i]), 0.0);
            assert_eq!(t.at(&[0, 2 * i + 1]), 1.0);
        }
        // p = 1, i = 0: sin(1)
        assert!((t.at(&[1, 0]) - 1f64.sin()).abs() < 1e-15);
        assert!((t.at(&[1, 0]) - 0.841471).abs() < 1e-6);
    }

    #[test]
    fn table_matches_per_entry_oracle() {
        let (l, d) = (7, 8);
        let t = sinusoid_table::<f64>(l, d).unwrap();
        for p in 0..l {
            for i in 0..d / 2 {
                let rate = p as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
                assert_eq!(t.at(&[p, 2 * i]), rate.sin());
                assert_eq!(t.at(&[p, 2 * i + 1]), rate.cos());
                assert!(t.at(&[p, 2 * i]).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn table_rejects_odd_dim() {
        assert!(sinusoid_table::<f64>(4, 5).is_err());
    }

    #[test]
    fn none_variant_is_zero() {
        let g = fixed_pe_grid::<f64>(PeVariant::None, 3, 4, 8).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flat_1d_runs_row_major() {
        let (h, w, d) = (2, 3, 4);
        let grid = fixed_pe_grid::<f64>(PeVariant::Flat1d, h, w, d).unwrap();
        let table = sinusoid_table::<f64>(h * w, d).unwrap();
        for y in 0..h {
            for x in 0..w {
                for di in 0..d {
                    assert_eq!(grid.at(&[di, y, x]), table.at(&[y * w + x, di]));
                }
            }
        }
    }

    #[test]
    fn concat_2d_first_half_ignores_width() {
        let (h, w, d) = (3, 5, 8);
        let grid = fixed_pe_grid::<f64>(PeVariant::Concat2d, h, w, d).unwrap();
        for y in 0..h {
            for di in 0..d / 2 {
                for x in 1..w {
                    assert_eq!(grid.at(&[di, y, 0]), grid.at(&[di, y, x]));
                }
            }
            // and the second half ignores height
            for di in d / 2..d {
                for x in 0..w {
                    assert_eq!(grid.at(&[di, 0, x]), grid.at(&[di, y, x]));
                }
            }
        }
    }

    fn toy_gates(d: usize, hidden: usize, zero_w2: bool) -> GateParams<f64> {
        let fill = |shape: &[usize], mul: f64| {
            Tensor::from_fn(shape, |i| ((i * 13 % 7) as f64 - 3.0) * 0.11 * mul)
        };
        GateParams {
            w1_h: fill(&[d, hidden], 1.0),
            w2_h: fill(&[hidden, d], if zero_w2 { 0.0 } else { 0.7 }),
            w1_w: fill(&[d, hidden], -1.0),
            w2_w: fill(&[hidden, d], if zero_w2 { 0.0 } else { -0.4 }),
        }
    }

    #[test]
    fn zero_second_layer_gives_half_gates() {
        let feature = Tensor::from_fn(&[2, 4, 3, 3], |i| (i as f64) * 0.01);
        let params = toy_gates(4, 2, true);
        let (a, b) = a2dpe_scales(&feature, &params).unwrap();
        for &v in a.data().iter().chain(b.data()) {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_batch_entries_give_identical_gates() {
        let one = Tensor::from_fn(&[1, 4, 2, 2], |i| (i as f64) * 0.3 - 1.0);
        let mut two = Tensor::zeros(&[2, 4, 2, 2]);
        two.data_mut()[..16].copy_from_slice(one.data());
        two.data_mut()[16..].copy_from_slice(one.data());
        let params = toy_gates(4, 2, false);
        let (a, _) = a2dpe_scales(&two, &params).unwrap();
        assert_eq!(&a.data()[..4], &a.data()[4..]);
    }

    #[test]
    fn gates_match_hand_composed_pipeline() {
        let (bsz, d, hidden, h, w) = (2, 4, 3, 2, 3);
        let feature = Tensor::from_fn(&[bsz, d, h, w], |i| ((i * 29 % 11) as f64) * 0.2 - 1.0);
        let params = toy_gates(d, hidden, false);
        let (a, _) = a2dpe_scales(&feature, &params).unwrap();
        // pool -> matmul -> relu -> matmul -> sigmoid, by hand
        for b in 0..bsz {
            let mut pooled = vec![0.0; d];
            for di in 0..d {
                let mut s = 0.0;
                for i in 0..h * w {
                    s += feature.data()[(b * d + di) * h * w + i];
                }
                pooled[di] = s / (h * w) as f64;
            }
            let mut mid = vec![0.0; hidden];
            for j in 0..hidden {
                let mut s = 0.0;
                for di in 0..d {
                    s += pooled[di] * params.w1_h.at(&[di, j]);
                }
                mid[j] = s.max(0.0);
            }
            for di in 0..d {
                let mut s = 0.0;
                for j in 0..hidden {
                    s += mid[j] * params.w2_h.at(&[j, di]);
                }
                let expect = 1.0 / (1.0 + (-s).exp());
                assert!((a.at(&[b, di]) - expect).abs() < 1e-12);
                assert!(a.at(&[b, di]) > 0.0 && a.at(&[b, di]) < 1.0);
            }
        }
    }

    #[test]
    fn unit_gates_reduce_to_table_sum() {
        let (d, h, w) = (4, 3, 2);
        let mut g = Graph::<f64>::new();
        let ones = g.constant(Tensor::full(&[1, d], 1.0));
        let ph = sinusoid_table::<f64>(h, d).unwrap();
        let pw = sinusoid_table::<f64>(w, d).unwrap();
        let out = g.pe_combine(ones, ones, &ph, &pw).unwrap();
        for y in 0..h {
            for x in 0..w {
                for di in 0..d {
                    let expect = ph.at(&[y, di]) + pw.at(&[x, di]);
                    assert_eq!(g.value(out).at(&[0, di, y, x]), expect);
                }
            }
        }
    }

    #[test]
    fn build_pe_requires_inputs_for_adaptive() {
        assert!(matches!(
            build_pe::<f64>(PeVariant::A2dpe, 2, 2, 4, None, None),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn adaptive_output_bounded_by_gate_sum() {
        // gates live in (0,1) and sinusoids in [-1,1], so |P| <= alpha + beta < 2
        let (d, h, w) = (4, 3, 3);
        let feature = Tensor::from_fn(&[1, d, h, w], |i| ((i * 7 % 13) as f64) * 0.4 - 2.0);
        let params = toy_gates(d, d / 2, false);
        let (a, b) = a2dpe_scales(&feature, &params).unwrap();
        let p = build_pe(PeVariant::A2dpe, h, w, d, Some(&feature), Some(&params)).unwrap();
        for di in 0..d {
            let bound = a.at(&[0, di]) + b.at(&[0, di]);
            for y in 0..h {
                for x in 0..w {
                    let v: f64 = p.at(&[0, di, y, x]);
                    assert!(v.abs() <= bound + 1e-12);
                    assert!(v.abs() < 2.0);
                }
            }
        }
    }
}
