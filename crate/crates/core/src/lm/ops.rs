//! Forward and backward kernels over row-major activations.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numeric::Real;

pub(crate) const LN_EPS: f64 = 1e-5;

/// `x[n, i] * w[i, o]`.
pub(crate) fn matmul<T: Real>(x: &[T], n: usize, w: &[T], i: usize, o: usize) -> Vec<T> {
    let mut y = vec![T::zero(); n * o];
    T::gemm(n, i, o, T::one(), x, false, w, false, T::zero(), &mut y);
    y
}

/// `dw[i, o] += x^T * dy`.
pub(crate) fn acc_weight_grad<T: Real>(x: &[T], n: usize, i: usize, dy: &[T], o: usize, dw: &mut [T]) {
    T::gemm(i, n, o, T::one(), x, true, dy, false, T::one(), dw);
}

/// `dy[n, o] * w[i, o]^T`.
pub(crate) fn matmul_t<T: Real>(dy: &[T], n: usize, w: &[T], i: usize, o: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); n * i];
    T::gemm(n, o, i, T::one(), dy, false, w, true, T::zero(), &mut dx);
    dx
}

pub(crate) fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

pub(crate) fn add_bias<T: Real>(y: &mut [T], b: &[T]) {
    for row in y.chunks_exact_mut(b.len()) {
        add_into(row, b);
    }
}

pub(crate) fn acc_bias_grad<T: Real>(dy: &[T], db: &mut [T]) {
    for row in dy.chunks_exact(db.len()) {
        add_into(db, row);
    }
}

pub(crate) struct LnCache<T> {
    pub y: Vec<T>,
    xhat: Vec<T>,
    rstd: Vec<T>,
}

pub(crate) fn layer_norm<T: Real>(x: &[T], g: &[T], b: &[T]) -> LnCache<T> {
    let d = g.len();
    let n = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n];
    let inv_d = T::of(1.0 / d as f64);
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * g[j] + b[j];
        }
    }
    LnCache { y, xhat, rstd }
}

pub(crate) fn layer_norm_bwd<T: Real>(dy: &[T], c: &LnCache<T>, g: &[T], dg: &mut [T], db: &mut [T]) -> Vec<T> {
    let d = g.len();
    let n = dy.len() / d;
    let inv_d = T::of(1.0 / d as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..n {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &c.xhat[r * d..(r + 1) * d];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xh[j];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        for j in 0..d {
            dx[r * d + j] = c.rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

/// Inverted dropout mask, or `None` when inactive.
pub(crate) fn dropout_mask<T: Real>(n: usize, p: f64, rng: Option<&mut ChaCha8Rng>) -> Option<Vec<T>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = T::of(1.0 / (1.0 - p));
    Some((0..n).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect())
}

pub(crate) fn apply_mask<T: Real>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, k) in x.iter_mut().zip(m) {
            *v *= *k;
        }
    }
}

/// One attention problem: query rows attend to key/value rows.
#[derive(Debug, Clone)]
pub(crate) struct Segment {
    pub q: Range<usize>,
    pub kv: Range<usize>,
    pub causal: bool,
}

#[derive(Clone, Copy)]
pub(crate) struct AttnWeights<'a, T> {
    pub q: &'a [T],
    pub k: &'a [T],
    pub v: &'a [T],
    pub o: &'a [T],
}

pub(crate) struct AttnGrads<'a, T> {
    pub q: &'a mut [T],
    pub k: &'a mut [T],
    pub v: &'a mut [T],
    pub o: &'a mut [T],
}

pub(crate) struct AttnCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
}

/// Scaled dot-product scores of one head, softmaxed in place.
fn head_probs<T: Real>(q: &[T], k: &[T], seg: &Segment, h: usize, dh: usize, d: usize, out: &mut Vec<T>) {
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let nk = seg.kv.len();
    for (qi, r) in seg.q.clone().enumerate() {
        let qrow = &q[r * d + h * dh..r * d + (h + 1) * dh];
        let start = out.len();
        let visible = if seg.causal { qi + 1 } else { nk };
        let mut max = T::neg_infinity();
        for kj in 0..nk {
            let s = if kj < visible {
                let c = seg.kv.start + kj;
                crate::numeric::dot(qrow, &k[c * d + h * dh..c * d + (h + 1) * dh]) * scale
            } else {
                T::neg_infinity()
            };
            max = max.max(s);
            out.push(s);
        }
        let row = &mut out[start..];
        let mut sum = T::zero();
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for s in row.iter_mut() {
            *s /= sum;
        }
    }
}

/// Multi-head attention; returns the output projection and the cache.
pub(crate) fn attention<T: Real>(
    w: AttnWeights<'_, T>,
    xq: &[T],
    xkv: &[T],
    segs: &[Segment],
    heads: usize,
    d: usize,
) -> (Vec<T>, AttnCache<T>) {
    let nq = xq.len() / d;
    let nk = xkv.len() / d;
    let q = matmul(xq, nq, w.q, d, d);
    let k = matmul(xkv, nk, w.k, d, d);
    let v = matmul(xkv, nk, w.v, d, d);
    attention_with_kv(w, q, k, v, segs, heads, d)
}

pub(crate) fn attention_with_kv<T: Real>(
    w: AttnWeights<'_, T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    segs: &[Segment],
    heads: usize,
    d: usize,
) -> (Vec<T>, AttnCache<T>) {
    let nq = q.len() / d;
    let dh = d / heads;
    let mut ctx = vec![T::zero(); nq * d];
    let mut probs = Vec::new();
    for seg in segs {
        for h in 0..heads {
            let start = probs.len();
            head_probs(&q, &k, seg, h, dh, d, &mut probs);
            let nk = seg.kv.len();
            for (qi, r) in seg.q.clone().enumerate() {
                let p = &probs[start + qi * nk..start + (qi + 1) * nk];
                let out = &mut ctx[r * d + h * dh..r * d + (h + 1) * dh];
                for (kj, &pv) in p.iter().enumerate() {
                    if pv == T::zero() {
                        continue;
                    }
                    let c = seg.kv.start + kj;
                    for (o, &vv) in out.iter_mut().zip(&v[c * d + h * dh..c * d + (h + 1) * dh]) {
                        *o += pv * vv;
                    }
                }
            }
        }
    }
    let y = matmul(&ctx, nq, w.o, d, d);
    (y, AttnCache { q, k, v, probs, ctx })
}

/// Returns `(dxq, dxkv)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_bwd<T: Real>(
    w: AttnWeights<'_, T>,
    g: AttnGrads<'_, T>,
    xq: &[T],
    xkv: &[T],
    c: &AttnCache<T>,
    dy: &[T],
    segs: &[Segment],
    heads: usize,
    d: usize,
) -> (Vec<T>, Vec<T>) {
    let nq = xq.len() / d;
    let nk = xkv.len() / d;
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    acc_weight_grad(&c.ctx, nq, d, dy, d, g.o);
    let dctx = matmul_t(dy, nq, w.o, d, d);
    let mut dq = vec![T::zero(); nq * d];
    let mut dk = vec![T::zero(); nk * d];
    let mut dv = vec![T::zero(); nk * d];
    let mut offset = 0;
    let mut dp = Vec::new();
    for seg in segs {
        let n_kv = seg.kv.len();
        for h in 0..heads {
            let hs = h * dh..(h + 1) * dh;
            for (qi, r) in seg.q.clone().enumerate() {
                let p = &c.probs[offset + qi * n_kv..offset + (qi + 1) * n_kv];
                let dc = &dctx[r * d + hs.start..r * d + hs.end];
                dp.clear();
                let mut dot_pdp = T::zero();
                for (kj, &pv) in p.iter().enumerate() {
                    let col = seg.kv.start + kj;
                    let vrow = &c.v[col * d + hs.start..col * d + hs.end];
                    let x = crate::numeric::dot(dc, vrow);
                    dp.push(x);
                    dot_pdp += pv * x;
                    if pv != T::zero() {
                        for (o, &g) in dv[col * d + hs.start..col * d + hs.end].iter_mut().zip(dc) {
                            *o += pv * g;
                        }
                    }
                }
                for (kj, &pv) in p.iter().enumerate() {
                    if pv == T::zero() {
                        continue;
                    }
                    let ds = pv * (dp[kj] - dot_pdp) * scale;
                    let col = seg.kv.start + kj;
                    for j in hs.clone() {
                        dq[r * d + j] += ds * c.k[col * d + j];
                        dk[col * d + j] += ds * c.q[r * d + j];
                    }
                }
            }
            offset += seg.q.len() * n_kv;
        }
    }
    acc_weight_grad(xq, nq, d, &dq, d, g.q);
    acc_weight_grad(xkv, nk, d, &dk, d, g.k);
    acc_weight_grad(xkv, nk, d, &dv, d, g.v);
    let dxq = matmul_t(&dq, nq, w.q, d, d);
    let mut dxkv = matmul_t(&dk, nk, w.k, d, d);
    add_into(&mut dxkv, &matmul_t(&dv, nk, w.v, d, d));
    (dxq, dxkv)
}

pub(crate) struct FfnCache<T> {
    hidden: Vec<T>,
}

pub(crate) fn ffn<T: Real>(x: &[T], w1: &[T], b1: &[T], w2: &[T], b2: &[T]) -> (Vec<T>, FfnCache<T>) {
    let d = b2.len();
    let f = b1.len();
    let n = x.len() / d;
    let mut hidden = matmul(x, n, w1, d, f);
    add_bias(&mut hidden, b1);
    for v in hidden.iter_mut() {
        *v = v.max(T::zero());
    }
    let mut y = matmul(&hidden, n, w2, f, d);
    add_bias(&mut y, b2);
    (y, FfnCache { hidden })
}

/// Gradient slices in layout order `w1, b1, w2, b2`.
pub(crate) fn ffn_bwd<T: Real>(
    x: &[T],
    c: &FfnCache<T>,
    dy: &[T],
    w1: &[T],
    w2: &[T],
    grads: [&mut [T]; 4],
) -> Vec<T> {
    let [gw1, gb1, gw2, gb2] = grads;
    let d = gb2.len();
    let f = gb1.len();
    let n = x.len() / d;
    acc_weight_grad(&c.hidden, n, f, dy, d, gw2);
    acc_bias_grad(dy, gb2);
    let mut dh = matmul_t(dy, n, w2, f, d);
    for (g, &h) in dh.iter_mut().zip(&c.hidden) {
        if h <= T::zero() {
            *g = T::zero();
        }
    }
    acc_weight_grad(x, n, d, &dh, f, gw1);
    acc_bias_grad(&dh, gb1);
    matmul_t(&dh, n, w1, d, f)
}

/// Log-softmax of one row, in 64-bit.
pub(crate) fn log_softmax<T: Real>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v.f64() - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = [1.0f64, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 8.0];
        let c = layer_norm(&x, &[1.0; 4], &[0.0; 4]);
        for row in c.y.chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn causal_probs_hide_the_future() {
        let d = 4;
        let q: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let seg = Segment { q: 0..3, kv: 0..3, causal: true };
        let mut p = Vec::new();
        head_probs(&q, &q, &seg, 0, d, d, &mut p);
        assert_eq!(p[1], 0.0);
        assert_eq!(p[2], 0.0);
        assert_eq!(p[5], 0.0);
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_normalizes() {
        let l = log_softmax(&[1.0f32, 2.0, 3.0, -50.0]);
        let s: f64 = l.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
