//! Forward and backward passes of the building blocks.
//!
//! Activations are row-major `[rows, width]` buffers. A batch is the
//! concatenation of its examples' rows (no padding), and attention is
//! computed separately for each example using the row offsets.

use rand::RngCore;

use super::float::{dot, gemm, gemm_view, Float, View};
use crate::seed;
use super::params::{Attention, FeedForward, LayerNorm, Linear};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Multipliers (0 or 1/(1-p)) for inverted dropout, `None` when inactive.
///
/// One draw from `rng` seeds a counter-based splitmix64 stream; each 64-bit
/// output yields four 16-bit uniforms, so `p` is realized to within 2^-16.
pub fn dropout_mask<T: Float>(rng: Option<&mut dyn RngCore>, len: usize, p: f64) -> Option<Vec<T>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let threshold = (p * 65536.0).round().min(65535.0) as u64;
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    let base = rng.next_u64();
    // table lookup instead of a branch: the keep/drop outcome is unpredictable
    let table = [T::zero(), keep];
    let mut mask = vec![T::zero(); len];
    for (i, quad) in mask.chunks_mut(4).enumerate() {
        let z = seed::splitmix64(base.wrapping_add(i as u64));
        for (j, m) in quad.iter_mut().enumerate() {
            *m = table[usize::from((z >> (16 * j)) & 0xffff >= threshold)];
        }
    }
    Some(mask)
}

pub fn apply_mask<T: Float>(x: &mut [T], mask: Option<&Vec<T>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

pub fn linear_forward<T: Float>(lin: &Linear<T>, x: &[T], rows: usize) -> Vec<T> {
    let (din, dout) = (lin.weight.shape[0], lin.weight.shape[1]);
    let (mut y, beta) = match &lin.bias {
        Some(b) => (b.data.repeat(rows), T::one()),
        None => (vec![T::zero(); rows * dout], T::zero()),
    };
    gemm(false, false, rows, dout, din, T::one(), x, &lin.weight.data, beta, &mut y);
    y
}

/// Accumulates weight/bias gradients into `grad`; returns `dL/dx` when asked.
pub fn linear_backward<T: Float>(
    lin: &Linear<T>,
    grad: &mut Linear<T>,
    x: &[T],
    dy: &[T],
    rows: usize,
    need_dx: bool,
) -> Option<Vec<T>> {
    let (din, dout) = (lin.weight.shape[0], lin.weight.shape[1]);
    gemm(true, false, din, dout, rows, T::one(), x, dy, T::one(), &mut grad.weight.data);
    if let Some(gb) = &mut grad.bias {
        for row in dy.chunks_exact(dout) {
            for (g, &v) in gb.data.iter_mut().zip(row) {
                *g += v;
            }
        }
    }
    need_dx.then(|| {
        let mut dx = vec![T::zero(); rows * din];
        gemm(false, true, rows, din, dout, T::one(), dy, &lin.weight.data, T::zero(), &mut dx);
        dx
    })
}

#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm_forward<T: Float>(ln: &LayerNorm<T>, x: &[T], width: usize) -> (Vec<T>, NormCache<T>) {
    let rows = x.len() / width;
    let eps = T::from_f64_lossy(LAYER_NORM_EPS);
    let inv_w = T::one() / T::from_usize(width).expect("width fits");
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<T>() * inv_w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let xh = &mut xhat[r * width..(r + 1) * width];
        let yr = &mut y[r * width..(r + 1) * width];
        for i in 0..width {
            xh[i] = (row[i] - mean) * rs;
            yr[i] = xh[i] * ln.gain.data[i] + ln.bias.data[i];
        }
    }
    (y, NormCache { xhat, rstd })
}

pub fn layer_norm_backward<T: Float>(ln: &LayerNorm<T>, grad: &mut LayerNorm<T>, cache: &NormCache<T>, dy: &[T]) -> Vec<T> {
    let width = ln.gain.data.len();
    let inv_w = T::one() / T::from_usize(width).expect("width fits");
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxhat = vec![T::zero(); width];
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let dyr = &dy[r * width..(r + 1) * width];
        let xh = &cache.xhat[r * width..(r + 1) * width];
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for i in 0..width {
            grad.gain.data[i] += dyr[i] * xh[i];
            grad.bias.data[i] += dyr[i];
            dxhat[i] = dyr[i] * ln.gain.data[i];
            sum_d += dxhat[i];
            sum_dx += dxhat[i] * xh[i];
        }
        let (mean_d, mean_dx) = (sum_d * inv_w, sum_dx * inv_w);
        let out = &mut dx[r * width..(r + 1) * width];
        for i in 0..width {
            out[i] = rs * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
    dx
}

/// Row offsets of each example in the query and key/value buffers.
#[derive(Clone, Copy, Debug)]
pub struct Segments<'a> {
    pub query: &'a [usize],
    pub key: &'a [usize],
}

#[derive(Clone, Debug)]
pub struct AttnCache<T> {
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// Softmax output before dropout, one `heads × Lq × Lk` block per example.
    pub probs: Vec<T>,
    pub prob_offsets: Vec<usize>,
    pub mask: Option<Vec<T>>,
    pub ctx: Vec<T>,
}

fn prob_offsets(seg: Segments<'_>, heads: usize) -> Vec<usize> {
    let batch = seg.query.len() - 1;
    let mut offs = Vec::with_capacity(batch + 1);
    offs.push(0);
    for b in 0..batch {
        let lq = seg.query[b + 1] - seg.query[b];
        let lk = seg.key[b + 1] - seg.key[b];
        offs.push(offs[b] + heads * lq * lk);
    }
    offs
}

/// Multi-head scaled dot-product attention over per-example segments.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward<T: Float>(
    attn: &Attention<T>,
    heads: usize,
    xq: &[T],
    xkv: &[T],
    seg: Segments<'_>,
    causal: bool,
    rng: Option<&mut dyn RngCore>,
    p_drop: f64,
) -> (Vec<T>, AttnCache<T>) {
    let d = attn.query.weight.shape[1];
    let dh = d / heads;
    let (nq, nk) = (xq.len() / d, xkv.len() / d);
    let q = linear_forward(&attn.query, xq, nq);
    let k = linear_forward(&attn.key, xkv, nk);
    let v = linear_forward(&attn.value, xkv, nk);
    let scale = T::one() / T::from_usize(dh).expect("head width").sqrt();
    let prob_offsets = prob_offsets(seg, heads);
    let batch = seg.query.len() - 1;

    let mut probs = vec![T::zero(); prob_offsets[batch]];
    for b in 0..batch {
        let (qs, ks) = (seg.query[b], seg.key[b]);
        let lq = seg.query[b + 1] - qs;
        let lk = seg.key[b + 1] - ks;
        for h in 0..heads {
            let block = prob_offsets[b] + h * lq * lk;
            gemm_view(
                lq,
                lk,
                dh,
                scale,
                &q,
                View::rows(qs * d + h * dh, d),
                &k,
                View::transposed(ks * d + h * dh, d),
                T::zero(),
                &mut probs,
                View::rows(block, lk),
            );
            for (i, row) in probs[block..block + lq * lk].chunks_exact_mut(lk).enumerate() {
                let lim = if causal { (i + 1).min(lk) } else { lk };
                let max = row[..lim].iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for p in &mut row[..lim] {
                    *p = (*p - max).exp();
                    sum += *p;
                }
                let inv = T::one() / sum;
                row[..lim].iter_mut().for_each(|p| *p *= inv);
                row[lim..].iter_mut().for_each(|p| *p = T::zero());
            }
        }
    }
    let mask = dropout_mask::<T>(rng, probs.len(), p_drop);
    let dropped;
    let used: &[T] = match &mask {
        Some(m) => {
            dropped = probs.iter().zip(m).map(|(&p, &k)| p * k).collect::<Vec<T>>();
            &dropped
        }
        None => &probs,
    };

    let mut ctx = vec![T::zero(); nq * d];
    for b in 0..batch {
        let (qs, ks) = (seg.query[b], seg.key[b]);
        let lq = seg.query[b + 1] - qs;
        let lk = seg.key[b + 1] - ks;
        for h in 0..heads {
            let block = prob_offsets[b] + h * lq * lk;
            gemm_view(
                lq,
                dh,
                lk,
                T::one(),
                used,
                View::rows(block, lk),
                &v,
                View::rows(ks * d + h * dh, d),
                T::zero(),
                &mut ctx,
                View::rows(qs * d + h * dh, d),
            );
        }
    }
    let y = linear_forward(&attn.output, &ctx, nq);
    (y, AttnCache { q, k, v, probs, prob_offsets, mask, ctx })
}

/// Returns `(dL/dxq, dL/dxkv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Float>(
    attn: &Attention<T>,
    grad: &mut Attention<T>,
    heads: usize,
    cache: &AttnCache<T>,
    xq: &[T],
    xkv: &[T],
    seg: Segments<'_>,
    causal: bool,
    dy: &[T],
) -> (Vec<T>, Vec<T>) {
    let _ = causal; // masked probabilities are exactly zero, so their gradients vanish
    let d = attn.query.weight.shape[1];
    let dh = d / heads;
    let (nq, nk) = (xq.len() / d, xkv.len() / d);
    let scale = T::one() / T::from_usize(dh).expect("head width").sqrt();
    let dctx = linear_backward(&attn.output, &mut grad.output, &cache.ctx, dy, nq, true).expect("dx requested");

    let mut dq = vec![T::zero(); nq * d];
    let mut dk = vec![T::zero(); nk * d];
    let mut dv = vec![T::zero(); nk * d];
    let (q, k, v, probs) = (&cache.q, &cache.k, &cache.v, &cache.probs);
    let dropped;
    let used: &[T] = match &cache.mask {
        Some(m) => {
            dropped = probs.iter().zip(m).map(|(&p, &k)| p * k).collect::<Vec<T>>();
            &dropped
        }
        None => probs,
    };
    let batch = seg.query.len() - 1;
    let mut ds = Vec::new();
    for b in 0..batch {
        let (qs, ks) = (seg.query[b], seg.key[b]);
        let lq = seg.query[b + 1] - qs;
        let lk = seg.key[b + 1] - ks;
        ds.resize(lq * lk, T::zero());
        for h in 0..heads {
            let block = cache.prob_offsets[b] + h * lq * lk;
            let (qv, kv) = (View::rows(qs * d + h * dh, d), View::rows(ks * d + h * dh, d));
            // gradient w.r.t. the dropped-out probabilities
            gemm_view(lq, lk, dh, T::one(), &dctx, qv, v, View::transposed(ks * d + h * dh, d), T::zero(), &mut ds, View::rows(0, lk));
            gemm_view(lk, dh, lq, T::one(), used, View::transposed(block, lk), &dctx, qv, T::one(), &mut dv, kv);
            let p = &probs[block..block + lq * lk];
            let m = cache.mask.as_ref().map(|m| &m[block..block + lq * lk]);
            for i in 0..lq {
                let row = &mut ds[i * lk..(i + 1) * lk];
                let prow = &p[i * lk..(i + 1) * lk];
                if let Some(m) = m {
                    row.iter_mut().zip(&m[i * lk..(i + 1) * lk]).for_each(|(g, &k)| *g *= k);
                }
                let sdot = dot(prow, row);
                for (g, &pj) in row.iter_mut().zip(prow) {
                    *g = pj * (*g - sdot) * scale;
                }
            }
            gemm_view(lq, dh, lk, T::one(), &ds, View::rows(0, lk), k, kv, T::one(), &mut dq, qv);
            gemm_view(lk, dh, lq, T::one(), &ds, View::transposed(0, lk), q, qv, T::one(), &mut dk, kv);
        }
    }
    let dxq = linear_backward(&attn.query, &mut grad.query, xq, &dq, nq, true).expect("dx requested");
    let mut dxkv = linear_backward(&attn.key, &mut grad.key, xkv, &dk, nk, true).expect("dx requested");
    let dxv = linear_backward(&attn.value, &mut grad.value, xkv, &dv, nk, true).expect("dx requested");
    dxkv.iter_mut().zip(&dxv).for_each(|(a, &b)| *a += b);
    (dxq, dxkv)
}

#[derive(Clone, Debug)]
pub struct FfCache<T> {
    pub pre: Vec<T>,
    pub act: Vec<T>,
    pub mask: Option<Vec<T>>,
}

pub fn feed_forward_forward<T: Float>(
    ff: &FeedForward<T>,
    x: &[T],
    rows: usize,
    rng: Option<&mut dyn RngCore>,
    p_drop: f64,
) -> (Vec<T>, FfCache<T>) {
    let pre = linear_forward(&ff.inner, x, rows);
    let mut act: Vec<T> = pre.iter().map(|&v| v.max(T::zero())).collect();
    let mask = dropout_mask::<T>(rng, act.len(), p_drop);
    apply_mask(&mut act, mask.as_ref());
    let y = linear_forward(&ff.outer, &act, rows);
    (y, FfCache { pre, act, mask })
}

pub fn feed_forward_backward<T: Float>(
    ff: &FeedForward<T>,
    grad: &mut FeedForward<T>,
    cache: &FfCache<T>,
    x: &[T],
    dy: &[T],
    rows: usize,
) -> Vec<T> {
    let mut dact = linear_backward(&ff.outer, &mut grad.outer, &cache.act, dy, rows, true).expect("dx requested");
    apply_mask(&mut dact, cache.mask.as_ref());
    for (g, &p) in dact.iter_mut().zip(&cache.pre) {
        *g = if p > T::zero() { *g } else { T::zero() };
    }
    linear_backward(&ff.inner, &mut grad.inner, x, &dact, rows, true).expect("dx requested")
}

/// Row-wise log-softmax in place; returns false if any row is not finite.
pub fn log_softmax_rows<T: Float>(x: &mut [T], width: usize) -> bool {
    let mut finite = true;
    for row in x.chunks_exact_mut(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
        finite &= lse.is_finite();
    }
    finite
}
