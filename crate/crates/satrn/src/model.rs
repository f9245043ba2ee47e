//! Full recognition model: encoder + decoder assembly, teacher-forced loss
//! path, and greedy sequence decoding with cross-attention capture.

use crate::config::ModelConfig;
use crate::decoder::Decoder;
use crate::encoder::{check_image_shape, Encoder};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{grid_to_seq, Forward};
use crate::params::{ParamBuilder, ParamSet};
use crate::pe::PeVariant;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::Vocab;
use std::collections::HashMap;

#[derive(Debug)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamSet<T>,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

/// Result of greedy decoding a batch.
#[derive(Debug)]
pub struct GreedyDecode<T: Scalar> {
    /// Emitted character ids per sample (end token not included).
    pub ids: Vec<Vec<u32>>,
    /// One `[H', W']` head-averaged cross-attention map (last decoder layer)
    /// per emitted token, including the final end emission when present.
    pub attn_maps: Vec<Vec<Tensor<T>>>,
    /// True where the sequence hit `max_len` without an end token.
    pub unterminated: Vec<bool>,
}

impl<T: Scalar> Model<T> {
    fn assemble(cfg: ModelConfig, mut builder: ParamBuilder<T>) -> Result<Model<T>> {
        cfg.validate()?;
        let vocab = cfg.vocab()?;
        let encoder = Encoder::register(&mut builder, &cfg)?;
        let decoder = Decoder::register(&mut builder, &cfg)?;
        let params = builder.finish()?;
        Ok(Model { cfg, vocab, params, encoder, decoder })
    }

    /// Fresh model with seeded fan-based initialization.
    pub fn build(cfg: ModelConfig) -> Result<Model<T>> {
        let seed = cfg.seed;
        Self::assemble(cfg, ParamBuilder::random(seed))
    }

    /// Model whose parameters come from named tensors (checkpoint load).
    pub fn from_tensors(cfg: ModelConfig, tensors: HashMap<String, Tensor<T>>) -> Result<Model<T>> {
        Self::assemble(cfg, ParamBuilder::from_tensors(tensors))
    }

    pub fn start_forward(&self, train: bool, dropout_seed: u64) -> Forward<T> {
        Forward::new(&self.params, train, self.cfg.dropout, dropout_seed)
    }

    /// Encoder pass over an image batch `[B, Cin, H, W]`.
    pub fn encode(&self, fwd: &mut Forward<T>, images: &Tensor<T>) -> Result<(Var, Vec<Var>)> {
        check_image_shape(&self.cfg, images.shape())?;
        let img = fwd.g.constant(images.clone());
        self.encoder.forward(fwd, img)
    }

    /// Teacher-forced decoder logits against an encoded memory grid.
    pub fn decode_teacher_forced(
        &self,
        fwd: &mut Forward<T>,
        memory_grid: Var,
        tokens: &[u32],
        batch: usize,
        t: usize,
    ) -> Result<(Var, Vec<Var>)> {
        if t > self.cfg.max_len + 1 {
            return Err(Error::Data(format!(
                "token length {t} exceeds max_len {} (+1 start)",
                self.cfg.max_len
            )));
        }
        let memory = grid_to_seq(&mut fwd.g, memory_grid)?;
        self.decoder.forward(fwd, tokens, batch, t, memory)
    }

    /// Adaptive-PE gates for an image batch; analysis-side entry point.
    pub fn a2dpe_gates(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        if self.cfg.pe != PeVariant::A2dpe {
            return Err(Error::Usage(format!(
                "model uses positional encoding {:?}, gates require a2dpe",
                self.cfg.pe.as_str()
            )));
        }
        check_image_shape(&self.cfg, images.shape())?;
        let mut fwd = self.start_forward(false, 0);
        let img = fwd.g.constant(images.clone());
        let feature = self.encoder.features(&mut fwd, img)?;
        match &self.encoder.pe {
            crate::encoder::PeModule::Adaptive { w1_h, w2_h, w1_w, w2_w, .. } => {
                let (v1h, v2h) = (fwd.p(*w1_h), fwd.p(*w2_h));
                let (v1w, v2w) = (fwd.p(*w1_w), fwd.p(*w2_w));
                let (a, b) =
                    crate::pe::gates_in_graph(&mut fwd.g, feature, v1h, v2h, v1w, v2w)?;
                Ok((fwd.g.value(a).clone(), fwd.g.value(b).clone()))
            }
            _ => unreachable!("variant checked above"),
        }
    }

    /// Greedy decoding: feed the start token, then argmax tokens, until the
    /// end token or `max_len` characters.
    pub fn greedy_decode(&self, images: &Tensor<T>) -> Result<GreedyDecode<T>> {
        let mut fwd = self.start_forward(false, 0);
        let (grid, _) = self.encode(&mut fwd, images)?;
        let memory = grid_to_seq(&mut fwd.g, grid)?;
        let (fh, fw) = self.cfg.feature_hw();
        let b = images.shape()[0];
        let v = self.decoder.n_classes();
        let heads = self.cfg.heads;
        let end = self.vocab.end_id();

        let mut ids: Vec<Vec<u32>> = vec![Vec::new(); b];
        let mut maps: Vec<Vec<Tensor<T>>> = vec![Vec::new(); b];
        let mut done = vec![false; b];
        for step in 0..=self.cfg.max_len {
            let t = step + 1;
            let mut tokens = Vec::with_capacity(b * t);
            for i in 0..b {
                tokens.push(self.vocab.start_id());
                for j in 0..step {
                    tokens.push(*ids[i].get(j).unwrap_or(&self.vocab.pad_id()));
                }
            }
            let (logits, cross) = self.decoder.forward(&mut fwd, &tokens, b, t, memory)?;
            let logits_t = fwd.g.value(logits);
            let cross_t = fwd.g.value(*cross.last().expect("decoder has layers"));
            let l = fh * fw;
            for i in 0..b {
                if done[i] {
                    continue;
                }
                // argmax over classes at the last position (ties: lowest id)
                let row = &logits_t.data()[(i * t + t - 1) * v..(i * t + t) * v];
                let mut best = 0usize;
                for (j, &val) in row.iter().enumerate() {
                    if val > row[best] {
                        best = j;
                    }
                }
                // head-averaged cross-attention at the emitting position
                let mut map = Tensor::<T>::zeros(&[fh, fw]);
                let inv_h = T::from_f64(1.0 / heads as f64);
                for h in 0..heads {
                    let base = ((i * heads + h) * t + t - 1) * l;
                    for p in 0..l {
                        map.data_mut()[p] += cross_t.data()[base + p] * inv_h;
                    }
                }
                maps[i].push(map);
                if best as u32 == end {
                    done[i] = true;
                } else {
                    ids[i].push(best as u32);
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
            if step == self.cfg.max_len {
                break;
            }
        }
        let unterminated: Vec<bool> = done.iter().map(|&d| !d).collect();
        Ok(GreedyDecode { ids, attn_maps: maps, unterminated })
    }
}
