//! Layer building blocks over the graph: linear, convolution, layer norm,
//! multi-head attention and the feedforward variants.
//!
//! Layer structs hold parameter ids plus hyperparameters only; a [`Forward`]
//! session binds a `ParamSet` into a fresh graph and threads dropout state.

use crate::config::FfVariant;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamBuilder, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// One forward pass: a graph with every parameter bound as a leaf.
pub struct Forward<T: Scalar> {
    pub g: Graph<T>,
    vars: Vec<Var>,
    pub train: bool,
    dropout: f64,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Forward<T> {
    /// Bind `params` into a fresh graph. `dropout_seed` only matters when
    /// `train` is set and the rate is nonzero.
    pub fn new(params: &ParamSet<T>, train: bool, dropout: f64, dropout_seed: u64) -> Self {
        let mut g = Graph::new();
        let vars = params
            .iter()
            .map(|(_, t)| {
                let detached = Tensor::new(t.shape().to_vec(), t.data().to_vec()).unwrap();
                g.leaf(detached, true)
            })
            .collect();
        Forward { g, vars, train, dropout, rng: ChaCha8Rng::seed_from_u64(dropout_seed) }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn dropout_node(&mut self, x: Var) -> Result<Var> {
        if self.train && self.dropout > 0.0 {
            self.g.dropout(x, self.dropout, &mut self.rng)
        } else {
            Ok(x)
        }
    }

    /// Accumulate this pass's parameter gradients into `params.grad`.
    pub fn read_grads_into(&self, params: &mut ParamSet<T>) {
        for i in 0..self.vars.len() {
            if let Some(g) = self.g.grad(self.vars[i]) {
                let t = params.get_mut(ParamId(i));
                let dst = t.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
                for (d, &s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }
}

/// `[B, D, H, W]` grid to `[B, H*W, D]` sequence (row-major positions).
pub fn grid_to_seq<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[0, 2, 3, 1])?;
    g.reshape(p, vec![s[0], s[2] * s[3], s[1]])
}

/// Inverse of [`grid_to_seq`].
pub fn seq_to_grid<T: Scalar>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, vec![s[0], h, w, s[2]])?;
    g.permute(r, &[0, 3, 1, 2])
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn register<T: Scalar>(
        b: &mut ParamBuilder<T>,
        prefix: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Result<Linear> {
        let w = b.weight(format!("{prefix}.w"), &[din, dout], din, dout)?;
        let bias = if bias { Some(b.zeros(format!("{prefix}.b"), &[dout])?) } else { None };
        Ok(Linear { w, b: bias })
    }

    /// Classifier-head variant: weight starts at zero so a fresh model emits
    /// uniform logits (first-batch cross-entropy is exactly ln V).
    pub fn register_zeroed<T: Scalar>(
        b: &mut ParamBuilder<T>,
        prefix: &str,
        din: usize,
        dout: usize,
    ) -> Result<Linear> {
        let w = b.zeros(format!("{prefix}.w"), &[din, dout])?;
        let bias = Some(b.zeros(format!("{prefix}.b"), &[dout])?);
        Ok(Linear { w, b: bias })
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<T>, x: Var) -> Result<Var> {
        fwd.g.linear(x, fwd.p(self.w), self.b.map(|b| fwd.p(b)))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar>(
        b: &mut ParamBuilder<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Conv2dLayer> {
        let fan_in = (cin / groups) * k * k;
        let fan_out = cout * k * k;
        let w = b.weight(format!("{prefix}.w"), &[cout, cin / groups, k, k], fan_in, fan_out)?;
        let bias = b.zeros(format!("{prefix}.b"), &[cout])?;
        Ok(Conv2dLayer { w, b: bias, stride, pad, groups })
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<T>, x: Var) -> Result<Var> {
        fwd.g.conv2d(x, fwd.p(self.w), Some(fwd.p(self.b)), self.stride, self.pad, self.groups)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormLayer {
    pub fn register<T: Scalar>(b: &mut ParamBuilder<T>, prefix: &str, dim: usize) -> Result<LayerNormLayer> {
        let gain = b.ones(format!("{prefix}.gain"), &[dim])?;
        let bias = b.zeros(format!("{prefix}.bias"), &[dim])?;
        Ok(LayerNormLayer { gain, bias })
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<T>, x: Var) -> Result<Var> {
        fwd.g.layer_norm(x, fwd.p(self.gain), fwd.p(self.bias), T::from_f64(LAYER_NORM_EPS))
    }
}

/// Multi-head attention with D x D projections (no biases) and 1/sqrt(dh)
/// logit scaling. Works for self- and cross-attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn register<T: Scalar>(
        b: &mut ParamBuilder<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
    ) -> Result<MultiHeadAttention> {
        let w = |name: &str, b: &mut ParamBuilder<T>| {
            b.weight(format!("{prefix}.{name}"), &[dim, dim], dim, dim)
        };
        Ok(MultiHeadAttention {
            wq: w("wq", b)?,
            wk: w("wk", b)?,
            wv: w("wv", b)?,
            wo: w("wo", b)?,
            heads,
            dim,
        })
    }

    fn split_heads<T: Scalar>(&self, g: &mut Graph<T>, x: Var, b: usize, t: usize) -> Result<Var> {
        let dh = self.dim / self.heads;
        let r = g.reshape(x, vec![b, t, self.heads, dh])?;
        let p = g.permute(r, &[0, 2, 1, 3])?;
        g.reshape(p, vec![b * self.heads, t, dh])
    }

    fn merge_heads<T: Scalar>(&self, g: &mut Graph<T>, x: Var, b: usize, t: usize) -> Result<Var> {
        let dh = self.dim / self.heads;
        let r = g.reshape(x, vec![b, self.heads, t, dh])?;
        let p = g.permute(r, &[0, 2, 1, 3])?;
        g.reshape(p, vec![b, t, self.dim])
    }

    /// Returns the projected output and the post-softmax attention weights
    /// `[B*heads, Tq, Tk]` (captured before dropout).
    pub fn attend<T: Scalar>(
        &self,
        fwd: &mut Forward<T>,
        queries: Var,
        keys_values: Var,
        mask: Option<Var>,
    ) -> Result<(Var, Var)> {
        let qs = fwd.g.shape(queries).to_vec();
        let ks = fwd.g.shape(keys_values).to_vec();
        let (b, tq, tk) = (qs[0], qs[1], ks[1]);
        let q = fwd.g.matmul(queries, fwd.p(self.wq))?;
        // scaling q by 1/sqrt(dh) here instead of the (much larger) logits
        let scale = T::from_f64(1.0 / ((self.dim / self.heads) as f64).sqrt());
        let q = fwd.g.scale(q, scale);
        let k = fwd.g.matmul(keys_values, fwd.p(self.wk))?;
        let v = fwd.g.matmul(keys_values, fwd.p(self.wv))?;
        let qh = self.split_heads(&mut fwd.g, q, b, tq)?;
        let kh = self.split_heads(&mut fwd.g, k, b, tk)?;
        let vh = self.split_heads(&mut fwd.g, v, b, tk)?;
        let kt = fwd.g.permute(kh, &[0, 2, 1])?;
        let logits = fwd.g.matmul(qh, kt)?;
        let logits = match mask {
            Some(m) => fwd.g.add(logits, m)?,
            None => logits,
        };
        let weights = fwd.g.softmax(logits, 2)?;
        let dropped = fwd.dropout_node(weights)?;
        let ctx = fwd.g.matmul(dropped, vh)?;
        let merged = self.merge_heads(&mut fwd.g, ctx, b, tq)?;
        let out = fwd.g.matmul(merged, fwd.p(self.wo))?;
        Ok((out, weights))
    }
}

/// Encoder feedforward over the 2D grid. All variants expand to
/// `ff_mult * dim` channels, apply relu (and optionally a depthwise 3x3),
/// and project back; dropout sits after the last inner activation.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub kind: FfVariant,
    pub expand: Conv2dLayer,
    pub depthwise: Option<Conv2dLayer>,
    pub project: Conv2dLayer,
}

impl FeedForward {
    pub fn register<T: Scalar>(
        b: &mut ParamBuilder<T>,
        prefix: &str,
        dim: usize,
        ff_mult: usize,
        kind: FfVariant,
    ) -> Result<FeedForward> {
        let hidden = dim * ff_mult;
        let (k1, k2) = match kind {
            FfVariant::Pointwise | FfVariant::Separable => (1, 1),
            FfVariant::Conv3 => (3, 3),
            FfVariant::Conv3Single => (3, 1),
        };
        let expand =
            Conv2dLayer::register(b, &format!("{prefix}.expand"), dim, hidden, k1, 1, k1 / 2, 1)?;
        let depthwise = if kind == FfVariant::Separable {
            Some(Conv2dLayer::register(
                b,
                &format!("{prefix}.depthwise"),
                hidden,
                hidden,
                3,
                1,
                1,
                hidden,
            )?)
        } else {
            None
        };
        let project =
            Conv2dLayer::register(b, &format!("{prefix}.project"), hidden, dim, k2, 1, k2 / 2, 1)?;
        Ok(FeedForward { kind, expand, depthwise, project })
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<T>, x_grid: Var) -> Result<Var> {
        let mut h = self.expand.forward(fwd, x_grid)?;
        h = fwd.g.relu(h);
        if let Some(dw) = &self.depthwise {
            h = dw.forward(fwd, h)?;
            h = fwd.g.relu(h);
        }
        h = fwd.dropout_node(h)?;
        self.project.forward(fwd, h)
    }
}

/// Decoder feedforward on token sequences: linear, relu, dropout, linear.
#[derive(Debug, Clone)]
pub struct SeqFeedForward {
    pub expand: Linear,
    pub project: Linear,
}

impl SeqFeedForward {
    pub fn register<T: Scalar>(
        b: &mut ParamBuilder<T>,
        prefix: &str,
        dim: usize,
        ff_mult: usize,
    ) -> Result<SeqFeedForward> {
        Ok(SeqFeedForward {
            expand: Linear::register(b, &format!("{prefix}.expand"), dim, dim * ff_mult, true)?,
            project: Linear::register(b, &format!("{prefix}.project"), dim * ff_mult, dim, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<T>, x: Var) -> Result<Var> {
        let h = self.expand.forward(fwd, x)?;
        let h = fwd.g.relu(h);
        let h = fwd.dropout_node(h)?;
        self.project.forward(fwd, h)
    }
}
