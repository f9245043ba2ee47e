//! Image encoder: shallow CNN front-end, positional-encoding injection, and
//! a stack of self-attention blocks with locality-aware feedforward layers.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{
    grid_to_seq, seq_to_grid, Conv2dLayer, FeedForward, Forward, LayerNormLayer,
    MultiHeadAttention,
};
use crate::params::{ParamBuilder, ParamId};
use crate::pe::{fixed_pe_grid, sinusoid_table, PeVariant};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Two 3x3 conv + 2x2 pool stages. The downsampling schedule generalizes the
/// default 1/4 x 1/4 reduction: extra height-only 2x1 pools sit between the
/// first pool and the second convolution, and the 1/2 x 1/2 schedule drops
/// the second pool entirely.
#[derive(Debug, Clone)]
pub struct ShallowCnn {
    pub conv1: Conv2dLayer,
    pub conv2: Conv2dLayer,
    extra_height_pools: usize,
    second_pool: bool,
}

impl ShallowCnn {
    pub fn register<T: Scalar>(b: &mut ParamBuilder<T>, prefix: &str, cfg: &ModelConfig) -> Result<ShallowCnn> {
        let conv1 = Conv2dLayer::register(b, &format!("{prefix}.conv1"), cfg.cin, cfg.dim, 3, 1, 1, 1)?;
        let conv2 = Conv2dLayer::register(b, &format!("{prefix}.conv2"), cfg.dim, cfg.dim, 3, 1, 1, 1)?;
        let (extra, second_pool) = match (cfg.down_h, cfg.down_w) {
            (2, 2) => (0, false),
            (h, 4) => ((h / 4).trailing_zeros() as usize, true),
            _ => (0, true), // unreachable past validation
        };
        Ok(ShallowCnn { conv1, conv2, extra_height_pools: extra, second_pool })
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<T>, images: Var) -> Result<Var> {
        let mut x = self.conv1.forward(fwd, images)?;
        x = fwd.g.relu(x);
        x = fwd.g.maxpool2d(x, (2, 2), (2, 2))?;
        for _ in 0..self.extra_height_pools {
            x = fwd.g.maxpool2d(x, (2, 1), (2, 1))?;
        }
        x = self.conv2.forward(fwd, x)?;
        x = fwd.g.relu(x);
        if self.second_pool {
            x = fwd.g.maxpool2d(x, (2, 2), (2, 2))?;
        }
        Ok(x)
    }
}

/// Positional-encoding injection at the block-stack input.
#[derive(Debug)]
pub enum PeModule<T: Scalar> {
    /// Zero or precomputed grid `[D, H', W']`; `None` skips the add.
    Fixed(Option<Tensor<T>>),
    Adaptive {
        w1_h: ParamId,
        w2_h: ParamId,
        w1_w: ParamId,
        w2_w: ParamId,
        ph: Tensor<T>,
        pw: Tensor<T>,
    },
}

impl<T: Scalar> PeModule<T> {
    pub fn register(b: &mut ParamBuilder<T>, prefix: &str, cfg: &ModelConfig) -> Result<PeModule<T>> {
        let (h, w) = cfg.feature_hw();
        let d = cfg.dim;
        match cfg.pe {
            PeVariant::None => Ok(PeModule::Fixed(None)),
            PeVariant::Flat1d | PeVariant::Concat2d => {
                Ok(PeModule::Fixed(Some(fixed_pe_grid(cfg.pe, h, w, d)?)))
            }
            PeVariant::A2dpe => {
                let hid = cfg.pe_hidden;
                Ok(PeModule::Adaptive {
                    w1_h: b.weight(format!("{prefix}.w1_h"), &[d, hid], d, hid)?,
                    w2_h: b.weight(format!("{prefix}.w2_h"), &[hid, d], hid, d)?,
                    w1_w: b.weight(format!("{prefix}.w1_w"), &[d, hid], d, hid)?,
                    w2_w: b.weight(format!("{prefix}.w2_w"), &[hid, d], hid, d)?,
                    ph: sinusoid_table(h, d)?,
                    pw: sinusoid_table(w, d)?,
                })
            }
        }
    }

    /// Add the encoding to the feature grid `[B, D, H', W']`.
    pub fn inject(&self, fwd: &mut Forward<T>, feature: Var) -> Result<Var> {
        match self {
            PeModule::Fixed(None) => Ok(feature),
            PeModule::Fixed(Some(grid)) => {
                let g = fwd.g.constant(grid.clone());
                fwd.g.add(feature, g)
            }
            PeModule::Adaptive { w1_h, w2_h, w1_w, w2_w, ph, pw } => {
                let (v1h, v2h) = (fwd.p(*w1_h), fwd.p(*w2_h));
                let (v1w, v2w) = (fwd.p(*w1_w), fwd.p(*w2_w));
                let (alpha, beta) =
                    crate::pe::gates_in_graph(&mut fwd.g, feature, v1h, v2h, v1w, v2w)?;
                let pe = fwd.g.pe_combine(alpha, beta, ph, pw)?;
                fwd.g.add(feature, pe)
            }
        }
    }
}

/// Post-norm residual block: self-attention then feedforward.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub ff: FeedForward,
    pub norm1: LayerNormLayer,
    pub norm2: LayerNormLayer,
}

impl EncoderBlock {
    pub fn register<T: Scalar>(b: &mut ParamBuilder<T>, prefix: &str, cfg: &ModelConfig) -> Result<EncoderBlock> {
        Ok(EncoderBlock {
            attn: MultiHeadAttention::register(b, &format!("{prefix}.attn"), cfg.dim, cfg.heads)?,
            ff: FeedForward::register(b, &format!("{prefix}.ff"), cfg.dim, cfg.ff_mult, cfg.ff)?,
            norm1: LayerNormLayer::register(b, &format!("{prefix}.norm1"), cfg.dim)?,
            norm2: LayerNormLayer::register(b, &format!("{prefix}.norm2"), cfg.dim)?,
        })
    }

    /// `x` is the `[B, L, D]` sequence over the `h x w` grid. Returns the
    /// block output and the attention weights `[B*heads, L, L]`.
    pub fn forward<T: Scalar>(
        &self,
        fwd: &mut Forward<T>,
        x: Var,
        h: usize,
        w: usize,
    ) -> Result<(Var, Var)> {
        let (a, weights) = self.attn.attend(fwd, x, x, None)?;
        let res = fwd.g.add(x, a)?;
        let x = self.norm1.forward(fwd, res)?;
        let grid = seq_to_grid(&mut fwd.g, x, h, w)?;
        let f = self.ff.forward(fwd, grid)?;
        let f = grid_to_seq(&mut fwd.g, f)?;
        let res = fwd.g.add(x, f)?;
        let out = self.norm2.forward(fwd, res)?;
        Ok((out, weights))
    }
}

#[derive(Debug)]
pub struct Encoder<T: Scalar> {
    pub cnn: ShallowCnn,
    /// Channelwise norm on the CNN output. Bare conv+relu features come out
    /// an order of magnitude smaller than the positional encoding, which
    /// buries the content signal at initialization; normalizing restores a
    /// workable ratio and the gain keeps it learnable.
    pub norm_in: LayerNormLayer,
    pub pe: PeModule<T>,
    pub blocks: Vec<EncoderBlock>,
}

impl<T: Scalar> Encoder<T> {
    pub fn register(b: &mut ParamBuilder<T>, cfg: &ModelConfig) -> Result<Encoder<T>> {
        let cnn = ShallowCnn::register(b, "encoder.cnn", cfg)?;
        let norm_in = LayerNormLayer::register(b, "encoder.norm_in", cfg.dim)?;
        let pe = PeModule::register(b, "encoder.pe", cfg)?;
        let blocks = (0..cfg.enc_layers)
            .map(|i| EncoderBlock::register(b, &format!("encoder.block{i}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoder { cnn, norm_in, pe, blocks })
    }

    /// CNN features, normalized per position. This is the `[B, D, H', W']`
    /// map the positional encoding (and its gates) sees.
    pub fn features(&self, fwd: &mut Forward<T>, images: Var) -> Result<Var> {
        let feature = self.cnn.forward(fwd, images)?;
        let shape = fwd.g.shape(feature).to_vec();
        let (h, w) = (shape[2], shape[3]);
        let seq = grid_to_seq(&mut fwd.g, feature)?;
        let normed = self.norm_in.forward(fwd, seq)?;
        seq_to_grid(&mut fwd.g, normed, h, w)
    }

    /// Full encoder pass. `images` is `[B, Cin, H, W]`; the result is the
    /// feature grid `[B, D, H', W']` plus per-layer attention weights.
    pub fn forward(&self, fwd: &mut Forward<T>, images: Var) -> Result<(Var, Vec<Var>)> {
        let feature = self.features(fwd, images)?;
        let shape = fwd.g.shape(feature).to_vec();
        let (h, w) = (shape[2], shape[3]);
        let with_pe = self.pe.inject(fwd, feature)?;
        let mut x = grid_to_seq(&mut fwd.g, with_pe)?;
        let mut attn = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, weights) = block.forward(fwd, x, h, w)?;
            x = next;
            attn.push(weights);
        }
        let grid = seq_to_grid(&mut fwd.g, x, h, w)?;
        Ok((grid, attn))
    }
}

/// Validate that an image batch matches the configured input geometry.
pub fn check_image_shape(cfg: &ModelConfig, shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[1] != cfg.cin || shape[2] != cfg.height || shape[3] != cfg.width {
        return Err(Error::Shape {
            op: "encoder",
            detail: format!(
                "image batch {shape:?} does not match configured input [B, {}, {}, {}]",
                cfg.cin, cfg.height, cfg.width
            ),
        });
    }
    Ok(())
}
