//! Reverse-mode automatic differentiation over a dynamically recorded
//! computation graph.
//!
//! Every forward op appends a node holding its output tensor plus whatever it
//! saved for the backward pass. Append order is topological order; backward
//! walks the node list in exact reverse, accumulating gradients into every
//! node that requires them. A graph instance is single-threaded; independent
//! graphs may run concurrently.

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Add { a: Var, b: Var },
    /// `b` is broadcast: either a single element or a trailing-shape slice of `a`.
    AddBroadcast { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Matmul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, b_batched: bool },
    Conv2d { x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize, groups: usize },
    MaxPool2d { x: Var, argmax: Vec<u32> },
    Relu { x: Var },
    Sigmoid { x: Var },
    Sin { x: Var },
    Cos { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<T>, rstd: Vec<T> },
    GlobalAvgPool { x: Var },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Embedding { table: Var, ids: Vec<u32> },
    CrossEntropy { logits: Var, targets: Vec<u32>, mask: Vec<bool>, probs: Vec<T>, counted: usize },
    Dropout { x: Var, mask: Vec<bool>, keep: T },
    Sum { x: Var },
    /// out[b,d,h,w] = alpha[b,d]*ph[h,d] + beta[b,d]*pw[w,d] with constant tables.
    PeCombine { alpha: Var, beta: Var, ph: Vec<T>, pw: Vec<T>, h: usize, w: usize },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Append-only computation record with reverse-mode backward.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn permute_fill<T: Scalar>(out: &mut [T], x: &[T], start: usize, dims: &[usize], step: &[usize]) {
    let rank = dims.len();
    let mut idx = vec![0usize; rank];
    let mut src = start;
    for o in out.iter_mut() {
        *o = x[src];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += step[ax];
            if idx[ax] < dims[ax] {
                break;
            }
            src -= step[ax] * dims[ax];
            idx[ax] = 0;
        }
    }
}

fn permute_data<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![T::zero(); x.len()];
    if rank > 1 && out_shape[0] > 1 && x.len() >= 1 << 16 {
        use rayon::prelude::*;
        let chunk = x.len() / out_shape[0];
        out.par_chunks_mut(chunk).enumerate().for_each(|(i0, oc)| {
            permute_fill(oc, x, i0 * step[0], &out_shape[1..], &step[1..]);
        });
    } else {
        permute_fill(&mut out, x, 0, &out_shape, &step);
    }
    (out_shape, out)
}

/// dst[i] += src[i], parallel for large buffers.
fn acc_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    if dst.len() >= 1 << 16 {
        use rayon::prelude::*;
        dst.par_chunks_mut(1 << 14).zip(src.par_chunks(1 << 14)).for_each(|(d, s)| {
            for (x, &y) in d.iter_mut().zip(s) {
                *x += y;
            }
        });
    } else {
        for (x, &y) in dst.iter_mut().zip(src) {
            *x += y;
        }
    }
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

struct ConvDims {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Insert a tensor as a graph leaf.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a node, if any was produced by `backward`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) == self.shape(b) {
            let data = kernels::zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
            let t = Tensor::new(self.shape(a).to_vec(), data)?;
            let rg = self.requires(a) || self.requires(b);
            return Ok(self.push(Op::Add { a, b }, t, rg));
        }
        self.add_broadcast(a, b)
    }

    /// `a + b` where `b` is a scalar tensor or a trailing-shape slice of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bn = self.value(b).numel();
        let suffix_ok = bn == 1
            || (bshape.len() <= ashape.len() && ashape[ashape.len() - bshape.len()..] == bshape[..]);
        if !suffix_ok {
            return Err(Error::Shape {
                op: "add",
                detail: format!("cannot broadcast {bshape:?} onto {ashape:?}"),
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = av.to_vec();
        if bn == 1 {
            let c = bv[0];
            data.iter_mut().for_each(|v| *v += c);
        } else {
            for chunk in data.chunks_mut(bn) {
                for (x, &y) in chunk.iter_mut().zip(bv) {
                    *x += y;
                }
            }
        }
        let t = Tensor::new(ashape, data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::AddBroadcast { a, b }, t, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "mul",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let data = kernels::zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Mul { a, b }, t, rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = kernels::map(self.value(a).data(), |x| x * c);
        let t = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let rg = self.requires(a);
        self.push(Op::Scale { a, c }, t, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = kernels::map(self.value(x).data(), |v| if v > T::zero() { v } else { T::zero() });
        let t = Tensor::new(self.shape(x).to_vec(), data).unwrap();
        let rg = self.requires(x);
        self.push(Op::Relu { x }, t, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = T::one();
        let data = kernels::map(self.value(x).data(), |v| one / (one + (-v).exp()));
        let t = Tensor::new(self.shape(x).to_vec(), data).unwrap();
        let rg = self.requires(x);
        self.push(Op::Sigmoid { x }, t, rg)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let data = kernels::map(self.value(x).data(), |v| v.sin());
        let t = Tensor::new(self.shape(x).to_vec(), data).unwrap();
        let rg = self.requires(x);
        self.push(Op::Sin { x }, t, rg)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let data = kernels::map(self.value(x).data(), |v| v.cos());
        let t = Tensor::new(self.shape(x).to_vec(), data).unwrap();
        let rg = self.requires(x);
        self.push(Op::Cos { x }, t, rg)
    }

    // ----- linear algebra -----

    /// Batched matrix product. `a` is `[..., M, K]`; `b` is either `[K, N]`
    /// (shared across the batch) or `[..., K, N]` with identical batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("need rank >= 2, got {ashape:?} and {bshape:?}"),
            });
        }
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (kb, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        let batch: usize = ashape[..ashape.len() - 2].iter().product();
        let b_batched = bshape.len() > 2;
        if k != kb
            || (b_batched && bshape[..bshape.len() - 2] != ashape[..ashape.len() - 2])
        {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{ashape:?} x {bshape:?}"),
            });
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), batch, m, k, n, b_batched);
        let mut out_shape = ashape[..ashape.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let t = Tensor::new(out_shape, data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Matmul { a, b, batch, m, k, n, b_batched }, t, rg))
    }

    /// x·w (+ bias broadcast over leading dims).
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_broadcast(y, b),
            None => Ok(y),
        }
    }

    /// 2D cross-correlation with zero padding.
    /// `x`: `[B, Cin, H, W]`, `w`: `[Cout, Cin/groups, Kh, Kw]`, bias `[Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let d = self.conv_dims(x, w, stride, pad, groups)?;
        if let Some(bv) = bias {
            if self.shape(bv) != [d.cout] {
                return Err(Error::Shape {
                    op: "conv2d",
                    detail: format!("bias {:?} vs Cout {}", self.shape(bv), d.cout),
                });
            }
        }
        let xin = self.value(x).data();
        let wv = self.value(w).data();
        let bvals: Vec<T> = match bias {
            Some(bv) => self.value(bv).data().to_vec(),
            None => vec![T::zero(); d.cout],
        };
        let cg_in = d.cin / groups;
        let cg_out = d.cout / groups;
        let kcol = cg_in * d.kh * d.kw;
        let l = d.oh * d.ow;
        let depthwise = groups == d.cin && d.cout == d.cin;
        let mut out = vec![T::zero(); d.b * d.cout * l];
        let image_sz = d.cout * l;

        // weights transposed per group so matmuls stream the small operand
        let wt: Vec<T> = if depthwise {
            Vec::new()
        } else {
            let mut wt = vec![T::zero(); wv.len()];
            for g in 0..groups {
                kernels::transpose_into(
                    &wv[g * cg_out * kcol..(g + 1) * cg_out * kcol],
                    &mut wt[g * kcol * cg_out..(g + 1) * kcol * cg_out],
                    cg_out,
                    kcol,
                );
            }
            wt
        };
        let one_by_one = d.kh == 1 && d.kw == 1 && stride == 1 && pad == 0 && groups == 1;
        let per_image = |bi: usize, oslice: &mut [T]| {
            if depthwise {
                for c in 0..d.cout {
                    dw_plane_forward(
                        &xin[(bi * d.cin + c) * d.h * d.w..],
                        d.h, d.w,
                        &wv[c * d.kh * d.kw..(c + 1) * d.kh * d.kw],
                        d.kh, d.kw, stride, pad,
                        &mut oslice[c * l..(c + 1) * l],
                        d.oh, d.ow,
                        bvals[c],
                    );
                }
                return;
            }
            if one_by_one {
                // plain channel mixing: out = W · x, bias prefilled
                for (c, chunk) in oslice.chunks_mut(l).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = bvals[c]);
                }
                kernels::matmul_acc(
                    oslice,
                    wv,
                    &xin[bi * d.cin * l..(bi + 1) * d.cin * l],
                    1, d.cout, d.cin, l, false,
                );
                return;
            }
            let mut tmp = vec![T::zero(); l * cg_out];
            for g in 0..groups {
                let xoff = (bi * d.cin + g * cg_in) * d.h * d.w;
                let cols_t = kernels::im2col_t(
                    &xin[xoff..xoff + cg_in * d.h * d.w],
                    cg_in, d.h, d.w, d.kh, d.kw, stride, pad, d.oh, d.ow,
                );
                tmp.iter_mut().for_each(|v| *v = T::zero());
                kernels::matmul_acc(
                    &mut tmp,
                    &cols_t,
                    &wt[g * kcol * cg_out..(g + 1) * kcol * cg_out],
                    1, l, kcol, cg_out, false,
                );
                // back to channel-major, fusing the bias add
                for c in 0..cg_out {
                    let dst = &mut oslice[(g * cg_out + c) * l..(g * cg_out + c + 1) * l];
                    let add = bvals[g * cg_out + c];
                    for (p, v) in dst.iter_mut().enumerate() {
                        *v = tmp[p * cg_out + c] + add;
                    }
                }
            }
        };
        if d.b > 1 && d.b * d.cout * kcol * l >= 1 << 15 {
            use rayon::prelude::*;
            out.par_chunks_mut(image_sz)
                .enumerate()
                .for_each(|(bi, oslice)| per_image(bi, oslice));
        } else {
            for (bi, oslice) in out.chunks_mut(image_sz).enumerate() {
                per_image(bi, oslice);
            }
        }
        let t = Tensor::new(vec![d.b, d.cout, d.oh, d.ow], out)?;
        let rg = self.requires(x) || self.requires(w) || bias.is_some_and(|b| self.requires(b));
        Ok(self.push(Op::Conv2d { x, w, bias, stride, pad, groups }, t, rg))
    }

    fn conv_dims(&self, x: Var, w: Var, stride: usize, pad: usize, groups: usize) -> Result<ConvDims> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("need 4-D input and weight, got {xs:?} and {ws:?}"),
            });
        }
        let (b, cin, h, w_) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin_g != cin / groups {
            return Err(Error::Config(format!(
                "conv2d groups={groups} incompatible with Cin={cin}, Cout={cout}, weight {ws:?}"
            )));
        }
        if stride == 0 || h + 2 * pad < kh || w_ + 2 * pad < kw
            || (h + 2 * pad - kh) % stride != 0
            || (w_ + 2 * pad - kw) % stride != 0
        {
            return Err(Error::Config(format!(
                "conv2d output extent not integral: input {h}x{w_}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w_ + 2 * pad - kw) / stride + 1;
        Ok(ConvDims { b, cin, h, w: w_, cout, kh, kw, oh, ow })
    }

    /// Window maximum with stride; gradient routes to the argmax (first
    /// occurrence in row-major window order on ties).
    pub fn maxpool2d(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape {
                op: "maxpool2d",
                detail: format!("need 4-D input, got {xs:?}"),
            });
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw) = kernel;
        let (sh, sw) = stride;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 || h < kh || w < kw
            || (h - kh) % sh != 0 || (w - kw) % sw != 0
        {
            return Err(Error::Config(format!(
                "maxpool2d {kh}x{kw}/{sh}x{sw} does not tile {h}x{w}"
            )));
        }
        let oh = (h - kh) / sh + 1;
        let ow = (w - kw) / sw + 1;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c * oh * ow];
        let mut argmax = vec![0u32; b * c * oh * ow];
        let opp = oh * ow;
        if b * c * h * w >= 1 << 15 {
            use rayon::prelude::*;
            out.par_chunks_mut(opp)
                .zip(argmax.par_chunks_mut(opp))
                .enumerate()
                .for_each(|(p, (o, a))| {
                    kernels::maxpool_plane(&xv[p * h * w..(p + 1) * h * w], h, w, kh, kw, sh, sw, o, a);
                });
        } else {
            for p in 0..b * c {
                kernels::maxpool_plane(
                    &xv[p * h * w..(p + 1) * h * w],
                    h, w, kh, kw, sh, sw,
                    &mut out[p * opp..(p + 1) * opp],
                    &mut argmax[p * opp..(p + 1) * opp],
                );
            }
        }
        let t = Tensor::new(vec![b, c, oh, ow], out)?;
        let rg = self.requires(x);
        Ok(self.push(Op::MaxPool2d { x, argmax }, t, rg))
    }

    // ----- normalization and reductions -----

    /// Exp-normalization along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Usage(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        if inner == 1 && xv.len() >= 1 << 15 {
            // contiguous rows: parallelize over whole rows
            use rayon::prelude::*;
            out.par_chunks_mut(len).enumerate().for_each(|(o, row)| {
                let xs = &xv[o * len..(o + 1) * len];
                let mut mx = xs[0];
                for &v in xs {
                    if v > mx {
                        mx = v;
                    }
                }
                let mut denom = T::zero();
                for (dst, &v) in row.iter_mut().zip(xs) {
                    let e = (v - mx).exp();
                    *dst = e;
                    denom += e;
                }
                let inv = T::one() / denom;
                row.iter_mut().for_each(|v| *v = *v * inv);
            });
        } else {
            for o in 0..outer {
                for j in 0..inner {
                    let base = o * len * inner + j;
                    let mut mx = xv[base];
                    for i in 1..len {
                        let v = xv[base + i * inner];
                        if v > mx {
                            mx = v;
                        }
                    }
                    let mut denom = T::zero();
                    for i in 0..len {
                        let e = (xv[base + i * inner] - mx).exp();
                        out[base + i * inner] = e;
                        denom += e;
                    }
                    for i in 0..len {
                        out[base + i * inner] = out[base + i * inner] / denom;
                    }
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.requires(x);
        Ok(self.push(Op::Softmax { x, axis }, t, rg))
    }

    /// Normalize the last axis to zero mean / unit variance, then apply gain
    /// and bias. Variance is the population variance with `eps` inside sqrt.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Shape {
            op: "layer_norm",
            detail: "rank-0 input".into(),
        })?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!(
                    "gain {:?} / bias {:?} vs last extent {d}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            });
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data().to_vec();
        let bv = self.value(bias).data().to_vec();
        let slices = xv.len() / d;
        let inv_d = T::one() / T::from_f64(d as f64);
        let mut out = vec![T::zero(); xv.len()];
        let mut means = vec![T::zero(); slices];
        let mut rstds = vec![T::zero(); slices];
        for s in 0..slices {
            let xs = &xv[s * d..(s + 1) * d];
            let mut mean = T::zero();
            for &v in xs {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = T::zero();
            for &v in xs {
                let c = v - mean;
                var += c * c;
            }
            var = var * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            means[s] = mean;
            rstds[s] = rstd;
            let os = &mut out[s * d..(s + 1) * d];
            for i in 0..d {
                os[i] = (xs[i] - mean) * rstd * gv[i] + bv[i];
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(Op::LayerNorm { x, gain, bias, mean: means, rstd: rstds }, t, rg))
    }

    /// Mean over all spatial positions: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape {
                op: "global_avg_pool",
                detail: format!("need 4-D input, got {xs:?}"),
            });
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let inv = T::one() / T::from_f64((h * w) as f64);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c];
        for p in 0..b * c {
            let mut s = T::zero();
            for &v in &xv[p * h * w..(p + 1) * h * w] {
                s += v;
            }
            out[p] = s * inv;
        }
        let t = Tensor::new(vec![b, c], out)?;
        let rg = self.requires(x);
        Ok(self.push(Op::GlobalAvgPool { x }, t, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(x).data() {
            s += v;
        }
        let rg = self.requires(x);
        self.push(Op::Sum { x }, Tensor::scalar(s), rg)
    }

    // ----- shape ops -----

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(x), shape),
            });
        }
        let t = Tensor::new(shape, self.value(x).data().to_vec())?;
        let rg = self.requires(x);
        Ok(self.push(Op::Reshape { x }, t, rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Usage(format!(
                "invalid permutation {perm:?} for shape {shape:?}"
            )));
        }
        let (out_shape, data) = permute_data(self.value(x).data(), &shape, perm);
        let t = Tensor::new(out_shape, data)?;
        let rg = self.requires(x);
        Ok(self.push(Op::Permute { x, perm: perm.to_vec() }, t, rg))
    }

    // ----- lookup, loss, regularization -----

    /// Row lookup: `table` is `[R, D]`, output is `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                detail: format!("table must be 2-D, got {ts:?}"),
            });
        }
        let (rows, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= rows) {
            return Err(Error::Data(format!("token id {bad} out of range (table rows {rows})")));
        }
        let tv = self.value(table).data();
        let mut out = vec![T::zero(); ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&tv[id as usize * d..(id as usize + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.requires(table);
        Ok(self.push(Op::Embedding { table, ids: ids.to_vec() }, t, rg))
    }

    /// Mean negative log-softmax probability of `targets` over unmasked
    /// positions. `logits` is `[..., V]`; `targets`/`mask` have one entry per
    /// leading position.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let v = *shape.last().ok_or_else(|| Error::Shape {
            op: "cross_entropy",
            detail: "rank-0 logits".into(),
        })?;
        let n = self.value(logits).numel() / v;
        if targets.len() != n || mask.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy",
                detail: format!("logits {shape:?} imply {n} positions, got {} targets / {} mask", targets.len(), mask.len()),
            });
        }
        if let Some(&bad) = targets.iter().zip(mask).find(|(&t, &m)| m && t as usize >= v).map(|(t, _)| t) {
            return Err(Error::Data(format!("target id {bad} out of range (classes {v})")));
        }
        let counted = mask.iter().filter(|&&m| m).count();
        if counted == 0 {
            return Err(Error::Data("cross_entropy: no unmasked positions".into()));
        }
        let xv = self.value(logits).data();
        let mut probs = vec![T::zero(); xv.len()];
        let mut loss = T::zero();
        for i in 0..n {
            let row = &xv[i * v..(i + 1) * v];
            let mut mx = row[0];
            for &val in row {
                if val > mx {
                    mx = val;
                }
            }
            let mut denom = T::zero();
            for (j, &val) in row.iter().enumerate() {
                let e = (val - mx).exp();
                probs[i * v + j] = e;
                denom += e;
            }
            let inv = T::one() / denom;
            for j in 0..v {
                probs[i * v + j] = probs[i * v + j] * inv;
            }
            if mask[i] {
                // -log p[target] computed from the stabilized pieces.
                let lse = denom.ln() + mx;
                loss += lse - row[targets[i] as usize];
            }
        }
        loss = loss / T::from_f64(counted as f64);
        let rg = self.requires(logits);
        Ok(self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs, counted },
            Tensor::scalar(loss),
            rg,
        ))
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 - rate);
        let inv = T::one() / keep;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut mask = vec![false; xv.len()];
        // u32 threshold draw: one word per element
        let threshold = (rate * 4294967296.0) as u64;
        for i in 0..xv.len() {
            if (rng.gen::<u32>() as u64) >= threshold {
                mask[i] = true;
                out[i] = xv[i] * inv;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.requires(x);
        Ok(self.push(Op::Dropout { x, mask, keep }, t, rg))
    }

    /// Gated sum of height/width position tables:
    /// `out[b,d,h,w] = alpha[b,d] * ph[h,d] + beta[b,d] * pw[w,d]`.
    pub fn pe_combine(&mut self, alpha: Var, beta: Var, ph: &Tensor<T>, pw: &Tensor<T>) -> Result<Var> {
        let ashape = self.shape(alpha).to_vec();
        if ashape.len() != 2 || self.shape(beta) != ashape {
            return Err(Error::Shape {
                op: "pe_combine",
                detail: format!("gates must be [B, D]: {:?} vs {:?}", ashape, self.shape(beta)),
            });
        }
        let (bsz, d) = (ashape[0], ashape[1]);
        let (h, w) = (ph.shape()[0], pw.shape()[0]);
        if ph.shape() != [h, d] || pw.shape() != [w, d] {
            return Err(Error::Shape {
                op: "pe_combine",
                detail: format!("tables {:?} / {:?} vs D={d}", ph.shape(), pw.shape()),
            });
        }
        let av = self.value(alpha).data();
        let bv = self.value(beta).data();
        let phd = ph.data();
        let pwd = pw.data();
        let mut out = vec![T::zero(); bsz * d * h * w];
        for b in 0..bsz {
            for di in 0..d {
                let ga = av[b * d + di];
                let gb = bv[b * d + di];
                let base = (b * d + di) * h * w;
                for hi in 0..h {
                    let ah = ga * phd[hi * d + di];
                    let row = base + hi * w;
                    for wi in 0..w {
                        out[row + wi] = ah + gb * pwd[wi * d + di];
                    }
                }
            }
        }
        let t = Tensor::new(vec![bsz, d, h, w], out)?;
        let rg = self.requires(alpha) || self.requires(beta);
        Ok(self.push(
            Op::PeCombine { alpha, beta, ph: phd.to_vec(), pw: pwd.to_vec(), h, w },
            t,
            rg,
        ))
    }

    // ----- backward -----

    /// Accumulate gradients of `loss` into every requires-grad node. Repeated
    /// calls without zeroing accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires(loss) {
            return Ok(());
        }
        {
            let slot = &mut self.grads[loss.0];
            let g = slot.get_or_insert_with(|| vec![T::zero(); 1]);
            g[0] += T::one();
        }
        let Graph { nodes, grads } = self;
        for id in (0..=loss.0).rev() {
            if !nodes[id].requires_grad || grads[id].is_none() {
                continue;
            }
            // Leaves keep their accumulated gradient; interior nodes give
            // theirs up once consumed.
            let g = if matches!(nodes[id].op, Op::Leaf) {
                continue;
            } else {
                grads[id].take().unwrap()
            };
            backward_op(nodes, grads, id, &g);
        }
        Ok(())
    }
}

/// Direct single-plane convolution for the depthwise fast path.
#[allow(clippy::too_many_arguments)]
fn dw_plane_forward<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    k: &[T],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
    oh: usize,
    ow: usize,
    bias: T,
) {
    for oy in 0..oh {
        for ox in 0..ow {
            let mut s = bias;
            for ki in 0..kh {
                let iy = (oy * stride + ki) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let row = iy as usize * w;
                for kj in 0..kw {
                    let ix = (ox * stride + kj) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    s += k[ki * kw + kj] * x[row + ix as usize];
                }
            }
            out[oy * ow + ox] = s;
        }
    }
}

/// Depthwise plane backward: accumulates the kernel gradient and, when
/// `dx` is given, the input gradient.
#[allow(clippy::too_many_arguments)]
fn dw_plane_backward<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    k: &[T],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    g: &[T],
    oh: usize,
    ow: usize,
    dk: &mut [T],
    mut dx: Option<&mut [T]>,
) {
    for oy in 0..oh {
        for ox in 0..ow {
            let gv = g[oy * ow + ox];
            if gv == T::zero() {
                continue;
            }
            for ki in 0..kh {
                let iy = (oy * stride + ki) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let row = iy as usize * w;
                for kj in 0..kw {
                    let ix = (ox * stride + kj) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    dk[ki * kw + kj] += gv * x[row + ix as usize];
                    if let Some(dxs) = dx.as_deref_mut() {
                        dxs[row + ix as usize] += gv * k[ki * kw + kj];
                    }
                }
            }
        }
    }
}

fn grad_slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backward_op<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, g: &[T]) {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                acc_into(ga, g);
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                acc_into(gb, g);
            }
        }
        Op::AddBroadcast { a, b } => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                acc_into(ga, g);
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                let bn = gb.len();
                if bn == 1 {
                    let mut s = T::zero();
                    for &y in g {
                        s += y;
                    }
                    gb[0] += s;
                } else {
                    for chunk in g.chunks(bn) {
                        for (x, &y) in gb.iter_mut().zip(chunk) {
                            *x += y;
                        }
                    }
                }
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            if nodes[a.0].requires_grad {
                let ga = grad_slot(nodes, grads, *a).unwrap();
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if nodes[b.0].requires_grad {
                let gb = grad_slot(nodes, grads, *b).unwrap();
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::Scale { a, c } => {
            let c = *c;
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x += y * c;
                }
            }
        }
        Op::Matmul { a, b, batch, m, k, n, b_batched } => {
            let (batch, m, k, n, b_batched) = (*batch, *m, *k, *n, *b_batched);
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            if nodes[a.0].requires_grad {
                // dA = dC · B^T
                let ga = grad_slot(nodes, grads, *a).unwrap();
                kernels::matmul_abt_acc(ga, g, bv, batch, m, n, k, b_batched);
            }
            if nodes[b.0].requires_grad {
                // dB = A^T · dC, summed over the batch when B is shared
                let gb = grad_slot(nodes, grads, *b).unwrap();
                if b_batched {
                    kernels::matmul_atb_batched_acc(gb, av, g, batch, m, k, n);
                } else {
                    kernels::matmul_atb_shared_acc(gb, av, g, batch, m, k, n);
                }
            }
        }
        Op::Conv2d { x, w, bias, stride, pad, groups } => {
            let (stride, pad, groups) = (*stride, *pad, *groups);
            let xs = nodes[x.0].value.shape();
            let ws = nodes[w.0].value.shape();
            let os = nodes[id].value.shape();
            let (b, cin, h, wid) = (xs[0], xs[1], xs[2], xs[3]);
            let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
            let (oh, ow) = (os[2], os[3]);
            let cg_in = cin / groups;
            let cg_out = cout / groups;
            let kcol = cg_in * kh * kw;
            let xv = nodes[x.0].value.data();
            let wv = nodes[w.0].value.data();
            let need_dx = nodes[x.0].requires_grad;
            let need_dw = nodes[w.0].requires_grad;
            let l = oh * ow;
            let depthwise = groups == cin && cout == cin;
            // one pass per image: this image's dX slice is written in place
            // and a partial dW (transposed layout for the general path) is
            // returned; partials are reduced in batch order afterwards so the
            // result is thread-count independent
            let one_by_one = kh == 1 && kw == 1 && stride == 1 && pad == 0 && groups == 1;
            let per_image = |bi: usize, mut dx_slice: Option<&mut [T]>| -> Vec<T> {
                let mut dw_part = if need_dw { vec![T::zero(); wv.len()] } else { Vec::new() };
                if one_by_one {
                    let gout = &g[bi * cout * l..(bi + 1) * cout * l];
                    let xs = &xv[bi * cin * l..(bi + 1) * cin * l];
                    if need_dw {
                        // dW[c, p] += gout[c, :] . x[p, :]
                        kernels::matmul_abt_acc(&mut dw_part, gout, xs, 1, cout, l, cin, false);
                    }
                    if let Some(dxs) = dx_slice.as_deref_mut() {
                        // dX[p, :] += sum_c W[c, p] * gout[c, :]
                        kernels::matmul_atb_batched_acc(dxs, wv, gout, 1, cout, cin, l);
                    }
                    return dw_part;
                }
                if depthwise {
                    for c in 0..cout {
                        let mut sink = [T::zero(); 0];
                        let dk: &mut [T] = if need_dw {
                            &mut dw_part[c * kh * kw..(c + 1) * kh * kw]
                        } else {
                            &mut sink
                        };
                        dw_plane_backward(
                            &xv[(bi * cin + c) * h * wid..],
                            h, wid,
                            &wv[c * kh * kw..(c + 1) * kh * kw],
                            kh, kw, stride, pad,
                            &g[(bi * cout + c) * l..(bi * cout + c + 1) * l],
                            oh, ow,
                            dk,
                            dx_slice.as_deref_mut().map(|dxs| &mut dxs[c * h * wid..(c + 1) * h * wid]),
                        );
                    }
                    return dw_part;
                }
                let mut gout_t = vec![T::zero(); l * cg_out];
                for gi in 0..groups {
                    let ooff = (bi * cout + gi * cg_out) * l;
                    let gout = &g[ooff..ooff + cg_out * l];
                    let xoff = (bi * cin + gi * cg_in) * h * wid;
                    if need_dw {
                        let cols_t = kernels::im2col_t(
                            &xv[xoff..xoff + cg_in * h * wid],
                            cg_in, h, wid, kh, kw, stride, pad, oh, ow,
                        );
                        // dW[c, p] += sum_pos gout[c, pos] * cols_t[pos, p]
                        kernels::matmul_acc(
                            &mut dw_part[gi * cg_out * kcol..(gi + 1) * cg_out * kcol],
                            gout,
                            &cols_t,
                            1, cg_out, l, kcol, false,
                        );
                    }
                    if let Some(dxs) = dx_slice.as_deref_mut() {
                        // dcols_t = gout^T · W_group, then scatter back
                        kernels::transpose_into(gout, &mut gout_t, cg_out, l);
                        let wg = &wv[gi * cg_out * kcol..(gi + 1) * cg_out * kcol];
                        let mut dcols_t = vec![T::zero(); l * kcol];
                        kernels::matmul_acc(&mut dcols_t, &gout_t, wg, 1, l, cg_out, kcol, false);
                        kernels::col2im_t_acc(
                            &dcols_t,
                            &mut dxs[gi * cg_in * h * wid..(gi + 1) * cg_in * h * wid],
                            cg_in, h, wid, kh, kw, stride, pad, oh, ow,
                        );
                    }
                }
                dw_part
            };
            let mut dx_acc = if need_dx { vec![T::zero(); xv.len()] } else { Vec::new() };
            let image_sz = cin * h * wid;
            let parallel = b > 1 && b * cout * kcol * l >= 1 << 15;
            let dw_parts: Vec<Vec<T>> = if need_dx {
                if parallel {
                    use rayon::prelude::*;
                    dx_acc
                        .par_chunks_mut(image_sz)
                        .enumerate()
                        .map(|(bi, dxs)| per_image(bi, Some(dxs)))
                        .collect()
                } else {
                    dx_acc
                        .chunks_mut(image_sz)
                        .enumerate()
                        .map(|(bi, dxs)| per_image(bi, Some(dxs)))
                        .collect()
                }
            } else if parallel {
                use rayon::prelude::*;
                (0..b).into_par_iter().map(|bi| per_image(bi, None)).collect()
            } else {
                (0..b).map(|bi| per_image(bi, None)).collect()
            };
            if need_dw {
                let gw = grad_slot(nodes, grads, *w).unwrap();
                for part in dw_parts {
                    for (x, y) in gw.iter_mut().zip(part) {
                        *x += y;
                    }
                }
            }
            if need_dx {
                let gx = grad_slot(nodes, grads, *x).unwrap();
                acc_into(gx, &dx_acc);
            }
            if let Some(bvar) = bias {
                if let Some(gb) = grad_slot(nodes, grads, *bvar) {
                    for bi in 0..b {
                        for c in 0..cout {
                            let o = (bi * cout + c) * oh * ow;
                            let mut s = T::zero();
                            for &y in &g[o..o + oh * ow] {
                                s += y;
                            }
                            gb[c] += s;
                        }
                    }
                }
            }
        }
        Op::MaxPool2d { x, argmax } => {
            let xs = nodes[x.0].value.shape();
            let (h, w) = (xs[2], xs[3]);
            let planes = xs[0] * xs[1];
            let opp = g.len() / planes;
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                if g.len() >= 1 << 15 {
                    use rayon::prelude::*;
                    gx.par_chunks_mut(h * w).enumerate().for_each(|(p, gxp)| {
                        for o in 0..opp {
                            gxp[argmax[p * opp + o] as usize] += g[p * opp + o];
                        }
                    });
                } else {
                    for p in 0..planes {
                        for o in 0..opp {
                            gx[p * h * w + argmax[p * opp + o] as usize] += g[p * opp + o];
                        }
                    }
                }
            }
        }
        Op::Relu { x } => {
            let xv = nodes[x.0].value.data();
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                if g.len() >= 1 << 16 {
                    use rayon::prelude::*;
                    gx.par_chunks_mut(1 << 14)
                        .zip(g.par_chunks(1 << 14).zip(xv.par_chunks(1 << 14)))
                        .for_each(|(gxc, (gc, xc))| {
                            for i in 0..gxc.len() {
                                if xc[i] > T::zero() {
                                    gxc[i] += gc[i];
                                }
                            }
                        });
                } else {
                    for i in 0..g.len() {
                        if xv[i] > T::zero() {
                            gx[i] += g[i];
                        }
                    }
                }
            }
        }
        Op::Sigmoid { x } => {
            let yv = nodes[id].value.data();
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * yv[i] * (T::one() - yv[i]);
                }
            }
        }
        Op::Sin { x } => {
            let xv = nodes[x.0].value.data();
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * xv[i].cos();
                }
            }
        }
        Op::Cos { x } => {
            let xv = nodes[x.0].value.data();
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] -= g[i] * xv[i].sin();
                }
            }
        }
        Op::Softmax { x, axis } => {
            let yv = nodes[id].value.data();
            let shape = nodes[id].value.shape();
            let (outer, len, inner) = axis_split(shape, *axis);
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                if inner == 1 && yv.len() >= 1 << 15 {
                    use rayon::prelude::*;
                    gx.par_chunks_mut(len).enumerate().for_each(|(o, gxr)| {
                        let ys = &yv[o * len..(o + 1) * len];
                        let gs = &g[o * len..(o + 1) * len];
                        let mut dot = T::zero();
                        for (y, gv) in ys.iter().zip(gs) {
                            dot += *y * *gv;
                        }
                        for i in 0..len {
                            gxr[i] += ys[i] * (gs[i] - dot);
                        }
                    });
                } else {
                    for o in 0..outer {
                        for j in 0..inner {
                            let base = o * len * inner + j;
                            let mut dot = T::zero();
                            for i in 0..len {
                                let ix = base + i * inner;
                                dot += g[ix] * yv[ix];
                            }
                            for i in 0..len {
                                let ix = base + i * inner;
                                gx[ix] += yv[ix] * (g[ix] - dot);
                            }
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, mean, rstd } => {
            let xv = nodes[x.0].value.data();
            let gv = nodes[gain.0].value.data();
            let d = gv.len();
            let slices = xv.len() / d;
            let inv_d = T::one() / T::from_f64(d as f64);
            if nodes[gain.0].requires_grad || nodes[bias.0].requires_grad {
                for s in 0..slices {
                    let (m, r) = (mean[s], rstd[s]);
                    for i in 0..d {
                        let ix = s * d + i;
                        let xhat = (xv[ix] - m) * r;
                        if let Some(gg) = grad_slot(nodes, grads, *gain) {
                            gg[i] += g[ix] * xhat;
                        }
                        if let Some(gb) = grad_slot(nodes, grads, *bias) {
                            gb[i] += g[ix];
                        }
                    }
                }
            }
            if nodes[x.0].requires_grad {
                let gx = grad_slot(nodes, grads, *x).unwrap();
                for s in 0..slices {
                    let (m, r) = (mean[s], rstd[s]);
                    let mut sum_gy = T::zero();
                    let mut sum_gy_xhat = T::zero();
                    for i in 0..d {
                        let ix = s * d + i;
                        let gy = g[ix] * gv[i];
                        let xhat = (xv[ix] - m) * r;
                        sum_gy += gy;
                        sum_gy_xhat += gy * xhat;
                    }
                    let mean_gy = sum_gy * inv_d;
                    let mean_gy_xhat = sum_gy_xhat * inv_d;
                    for i in 0..d {
                        let ix = s * d + i;
                        let gy = g[ix] * gv[i];
                        let xhat = (xv[ix] - m) * r;
                        gx[ix] += r * (gy - mean_gy - xhat * mean_gy_xhat);
                    }
                }
            }
        }
        Op::GlobalAvgPool { x } => {
            let xs = nodes[x.0].value.shape();
            let (h, w) = (xs[2], xs[3]);
            let inv = T::one() / T::from_f64((h * w) as f64);
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for p in 0..g.len() {
                    let gv = g[p] * inv;
                    for v in &mut gx[p * h * w..(p + 1) * h * w] {
                        *v += gv;
                    }
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                acc_into(gx, g);
            }
        }
        Op::Permute { x, perm } => {
            if nodes[x.0].requires_grad {
                let inv = inverse_perm(perm);
                let (_, gperm) = permute_data(g, nodes[id].value.shape(), &inv);
                let gx = grad_slot(nodes, grads, *x).unwrap();
                acc_into(gx, &gperm);
            }
        }
        Op::Embedding { table, ids } => {
            if let Some(gt) = grad_slot(nodes, grads, *table) {
                let d = gt.len() / nodes[table.0].value.shape()[0];
                for (i, &id_) in ids.iter().enumerate() {
                    let dst = &mut gt[id_ as usize * d..(id_ as usize + 1) * d];
                    for (x, &y) in dst.iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *x += y;
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets, mask, probs, counted } => {
            if let Some(gl) = grad_slot(nodes, grads, *logits) {
                let v = gl.len() / targets.len();
                let scale = g[0] / T::from_f64(*counted as f64);
                for i in 0..targets.len() {
                    if !mask[i] {
                        continue;
                    }
                    let row = &mut gl[i * v..(i + 1) * v];
                    let prow = &probs[i * v..(i + 1) * v];
                    for j in 0..v {
                        row[j] += scale * prow[j];
                    }
                    row[targets[i] as usize] -= scale;
                }
            }
        }
        Op::Dropout { x, mask, keep } => {
            let inv = T::one() / *keep;
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                if g.len() >= 1 << 16 {
                    use rayon::prelude::*;
                    gx.par_chunks_mut(1 << 14)
                        .zip(g.par_chunks(1 << 14).zip(mask.par_chunks(1 << 14)))
                        .for_each(|(gxc, (gc, mc))| {
                            for i in 0..gxc.len() {
                                if mc[i] {
                                    gxc[i] += gc[i] * inv;
                                }
                            }
                        });
                } else {
                    for i in 0..g.len() {
                        if mask[i] {
                            gx[i] += g[i] * inv;
                        }
                    }
                }
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                let gv = g[0];
                for v in gx.iter_mut() {
                    *v += gv;
                }
            }
        }
        Op::PeCombine { alpha, beta, ph, pw, h, w } => {
            let (h, w) = (*h, *w);
            let d = nodes[alpha.0].value.shape()[1];
            let bsz = nodes[alpha.0].value.shape()[0];
            if let Some(ga) = grad_slot(nodes, grads, *alpha) {
                for b in 0..bsz {
                    for di in 0..d {
                        let base = (b * d + di) * h * w;
                        let mut s = T::zero();
                        for hi in 0..h {
                            let mut row_sum = T::zero();
                            for wi in 0..w {
                                row_sum += g[base + hi * w + wi];
                            }
                            s += row_sum * ph[hi * d + di];
                        }
                        ga[b * d + di] += s;
                    }
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, *beta) {
                for b in 0..bsz {
                    for di in 0..d {
                        let base = (b * d + di) * h * w;
                        let mut s = T::zero();
                        for wi in 0..w {
                            let mut col_sum = T::zero();
                            for hi in 0..h {
                                col_sum += g[base + hi * w + wi];
                            }
                            s += col_sum * pw[wi * d + di];
                        }
                        gb[b * d + di] += s;
                    }
                }
            }
        }
    }
}
