//! Raw compute kernels behind the graph ops.
//!
//! Parallelism contract: work is only ever split across *independent output
//! elements*; every reduction is computed sequentially by a single thread.
//! Results are therefore bit-identical for any rayon thread-pool size.

use crate::scalar::Scalar;
use rayon::prelude::*;

/// Minimum number of multiply-adds before a kernel bothers with threads.
const PAR_THRESHOLD: usize = 1 << 15;

/// Rows of B processed per block so the active B tile stays cache-resident
/// while the row loop sweeps over it.
#[inline]
fn k_block(n: usize) -> usize {
    (1 << 15) / n.max(1)
}

/// C[m,n] += A[m,k] * B[k,n] for one matrix; caller provides zeroed or
/// pre-accumulated output. The k loop is tiled (see [`k_block`]).
#[inline]
fn matmul_acc_single<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    let kb = k_block(n).clamp(1, k);
    let mut k0 = 0;
    while k0 < k {
        let k1 = (k0 + kb).min(k);
        for i in 0..m {
            let arow = &a[i * k + k0..i * k + k1];
            let crow = &mut c[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let brow = &b[(k0 + p) * n..(k0 + p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
        k0 = k1;
    }
}

/// Batched C = A·B. `a` is `[batch, m, k]`; `b` is `[batch, k, n]` when
/// `b_batched`, else a shared `[k, n]`.
pub fn matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
) -> Vec<T> {
    let mut c = vec![T::zero(); batch * m * n];
    matmul_acc(&mut c, a, b, batch, m, k, n, b_batched);
    c
}

/// Batched C += A·B with the same layout conventions as [`matmul`].
#[allow(clippy::too_many_arguments)]
pub fn matmul_acc<T: Scalar>(
    c: &mut [T],
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
) {
    let work = batch * m * k * n;
    if work < PAR_THRESHOLD || batch * m < 2 {
        for bi in 0..batch {
            let boff = if b_batched { bi * k * n } else { 0 };
            matmul_acc_single(
                &mut c[bi * m * n..(bi + 1) * m * n],
                &a[bi * m * k..(bi + 1) * m * k],
                &b[boff..boff + k * n],
                m,
                k,
                n,
            );
        }
        return;
    }
    // Split on output rows across the whole batch; each row is one task.
    let rows = batch * m;
    let per_row = k * n;
    let chunk = (PAR_THRESHOLD / per_row.max(1)).clamp(1, rows);
    let kb = k_block(n).clamp(1, k);
    c.par_chunks_mut(chunk * n).enumerate().for_each(|(ci, cchunk)| {
        let row0 = ci * chunk;
        let mut k0 = 0;
        while k0 < k {
            let k1 = (k0 + kb).min(k);
            for (r, crow) in cchunk.chunks_mut(n).enumerate() {
                let row = row0 + r;
                let (bi, i) = (row / m, row % m);
                let arow = &a[(bi * m + i) * k + k0..(bi * m + i) * k + k1];
                let boff = if b_batched { bi * k * n } else { 0 };
                for (p, &av) in arow.iter().enumerate() {
                    if av == T::zero() {
                        continue;
                    }
                    let brow = &b[boff + (k0 + p) * n..boff + (k0 + p + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
            k0 = k1;
        }
    });
}

/// C += A·B^T where `a` is `[batch, m, n]`, `b` is `[k, n]` (shared) or
/// `[batch, k, n]`, and `c` is `[batch, m, k]`. This is the dA side of a
/// matmul backward: every output row is one task, reductions stay serial.
#[allow(clippy::too_many_arguments)]
pub fn matmul_abt_acc<T: Scalar>(
    c: &mut [T],
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    n: usize,
    k: usize,
    b_batched: bool,
) {
    let rows = batch * m;
    let row_task = move |row: usize, crow: &mut [T]| {
        let bi = row / m;
        let arow = &a[row * n..(row + 1) * n];
        let boff = if b_batched { bi * k * n } else { 0 };
        for (p, cv) in crow.iter_mut().enumerate() {
            let brow = &b[boff + p * n..boff + (p + 1) * n];
            let mut s = T::zero();
            for (x, y) in arow.iter().zip(brow) {
                s += *x * *y;
            }
            *cv += s;
        }
    };
    if rows * n * k < PAR_THRESHOLD {
        for row in 0..rows {
            row_task(row, &mut c[row * k..(row + 1) * k]);
        }
    } else {
        let chunk = (PAR_THRESHOLD / (n * k).max(1)).clamp(1, rows);
        c.par_chunks_mut(chunk * k).enumerate().for_each(|(ci, cchunk)| {
            for (r, crow) in cchunk.chunks_mut(k).enumerate() {
                row_task(ci * chunk + r, crow);
            }
        });
    }
}

/// C += A^T·G per batch: `a` is `[batch, m, k]`, `g` is `[batch, m, n]`,
/// `c` is `[batch, k, n]`. The dB side of a batched matmul backward.
pub fn matmul_atb_batched_acc<T: Scalar>(
    c: &mut [T],
    a: &[T],
    g: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    let rows = batch * k;
    let row_task = move |row: usize, crow: &mut [T]| {
        let (bi, p) = (row / k, row % k);
        for i in 0..m {
            let av = a[(bi * m + i) * k + p];
            if av == T::zero() {
                continue;
            }
            let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    };
    if rows * m * n < PAR_THRESHOLD {
        for row in 0..rows {
            row_task(row, &mut c[row * n..(row + 1) * n]);
        }
    } else {
        let chunk = (PAR_THRESHOLD / (m * n).max(1)).clamp(1, rows);
        c.par_chunks_mut(chunk * n).enumerate().for_each(|(ci, cchunk)| {
            for (r, crow) in cchunk.chunks_mut(n).enumerate() {
                row_task(ci * chunk + r, crow);
            }
        });
    }
}

/// C += sum_batch A^T·G for a shared right-hand side: `a` is `[batch, m, k]`,
/// `g` is `[batch, m, n]`, `c` is `[k, n]`. Each output row sums its batch
/// contributions sequentially, so the result is thread-count independent.
pub fn matmul_atb_shared_acc<T: Scalar>(
    c: &mut [T],
    a: &[T],
    g: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    let row_task = move |p: usize, crow: &mut [T]| {
        for bi in 0..batch {
            for i in 0..m {
                let av = a[(bi * m + i) * k + p];
                if av == T::zero() {
                    continue;
                }
                let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                for (cv, &gv) in crow.iter_mut().zip(grow) {
                    *cv += av * gv;
                }
            }
        }
    };
    if batch * m * k * n < PAR_THRESHOLD {
        for p in 0..k {
            row_task(p, &mut c[p * n..(p + 1) * n]);
        }
    } else {
        c.par_chunks_mut(n).enumerate().for_each(|(p, crow)| row_task(p, crow));
    }
}

/// Extract convolution patches for one image (one group slice).
/// Input `x` is `[c, h, w]`; output is `[c*kh*kw, oh*ow]` row-major.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut cols = vec![T::zero(); c * kh * kw * oh * ow];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let dst = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[dst + ox] = x[(ci * h + iy) * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Position-major patches: `[oh*ow, c*kh*kw]`. This orientation keeps the
/// weight matrix as the streamed matmul operand, which stays cache-resident.
#[allow(clippy::too_many_arguments)]
pub fn im2col_t<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let kcol = c * kh * kw;
    let mut cols = vec![T::zero(); oh * ow * kcol];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = (oy * ow + ox) * kcol;
            for ci in 0..c {
                for ki in 0..kh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = (ci * h + iy as usize) * w;
                    let base = dst + (ci * kh + ki) * kw;
                    for kj in 0..kw {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[base + kj] = x[src + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add position-major patches back onto an image.
#[allow(clippy::too_many_arguments)]
pub fn col2im_t_acc<T: Scalar>(
    cols: &[T],
    dx: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let kcol = c * kh * kw;
    for oy in 0..oh {
        for ox in 0..ow {
            let src = (oy * ow + ox) * kcol;
            for ci in 0..c {
                for ki in 0..kh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = (ci * h + iy as usize) * w;
                    let base = src + (ci * kh + ki) * kw;
                    for kj in 0..kw {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[dst + ix as usize] += cols[base + kj];
                    }
                }
            }
        }
    }
}

/// Transpose a row-major `[m, n]` matrix into `[n, m]`.
pub fn transpose_into<T: Scalar>(src: &[T], dst: &mut [T], m: usize, n: usize) {
    for i in 0..m {
        let row = &src[i * n..(i + 1) * n];
        for (j, &v) in row.iter().enumerate() {
            dst[j * m + i] = v;
        }
    }
}

/// Scatter-add patches back onto an image: inverse of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<T: Scalar>(
    cols: &[T],
    dx: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let src = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[(ci * h + iy) * w + ix as usize] += cols[src + ox];
                    }
                }
            }
        }
    }
}

/// Max pooling over one plane. Returns pooled values and flat argmax indices
/// (first occurrence in row-major window scan wins ties).
#[allow(clippy::too_many_arguments)]
pub fn maxpool_plane<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    out: &mut [T],
    argmax: &mut [u32],
) {
    let oh = (h - kh) / sh + 1;
    let ow = (w - kw) / sw + 1;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut best = x[(oy * sh) * w + ox * sw];
            let mut best_idx = (oy * sh) * w + ox * sw;
            for ki in 0..kh {
                let iy = oy * sh + ki;
                for kj in 0..kw {
                    let ix = ox * sw + kj;
                    let v = x[iy * w + ix];
                    if v > best {
                        best = v;
                        best_idx = iy * w + ix;
                    }
                }
            }
            out[oy * ow + ox] = best;
            argmax[oy * ow + ox] = best_idx as u32;
        }
    }
}

/// Elementwise map with optional parallelism over output chunks.
pub fn map<T: Scalar>(x: &[T], f: impl Fn(T) -> T + Sync) -> Vec<T> {
    if x.len() < PAR_THRESHOLD {
        x.iter().map(|&v| f(v)).collect()
    } else {
        x.par_iter().map(|&v| f(v)).collect()
    }
}

/// Elementwise zip-map of two equally long slices.
pub fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T + Sync) -> Vec<T> {
    debug_assert_eq!(a.len(), b.len());
    if a.len() < PAR_THRESHOLD {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else {
        a.par_iter().zip(b.par_iter()).map(|(&x, &y)| f(x, y)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..8).map(|i| (i as f64) * 0.7 - 2.0).collect();
        let c = matmul(&a, &b, 1, 3, 4, 2, false);
        let expect = naive_matmul(&a, &b, 3, 4, 2);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_parallel_path_matches_serial() {
        // Large enough to cross PAR_THRESHOLD.
        let (m, k, n) = (64, 40, 48);
        let a: Vec<f64> = (0..2 * m * k).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect();
        let b: Vec<f64> = (0..2 * k * n).map(|i| ((i * 53 % 97) as f64) / 40.0 - 1.2).collect();
        let par = matmul(&a, &b, 2, m, k, n, true);
        let mut ser = vec![0.0; 2 * m * n];
        for bi in 0..2 {
            let c = naive_matmul(&a[bi * m * k..(bi + 1) * m * k], &b[bi * k * n..(bi + 1) * k * n], m, k, n);
            ser[bi * m * n..(bi + 1) * m * n].copy_from_slice(&c);
        }
        assert_eq!(par.len(), ser.len());
        for (x, y) in par.iter().zip(&ser) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let (c, h, w, kh, kw, s, p) = (2, 5, 4, 3, 3, 1, 1);
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (w + 2 * p - kw) / s + 1;
        let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 31 % 17) as f64) - 8.0).collect();
        let cols = im2col(&x, c, h, w, kh, kw, s, p, oh, ow);
        let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 13 % 23) as f64) - 11.0).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_acc(&y, &mut back, c, h, w, kh, kw, s, p, oh, ow);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn maxpool_first_occurrence_tie_break() {
        let x = vec![3.0f64, 3.0, 3.0, 3.0];
        let mut out = vec![0.0; 1];
        let mut arg = vec![0u32; 1];
        maxpool_plane(&x, 2, 2, 2, 2, 2, 2, &mut out, &mut arg);
        assert_eq!(out[0], 3.0);
        assert_eq!(arg[0], 0);
    }
}
