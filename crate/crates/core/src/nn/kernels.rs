//! Raw forward/backward kernels over flat row-major buffers.
//!
//! Every kernel writes each output element from exactly one task and reduces
//! in a fixed order, so results are bit-identical across thread counts.

use rayon::prelude::*;

use crate::tensor::Scalar;

#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Geometry of a 1-D convolution with "same"-style padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub len: usize,
    pub width: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub out_len: usize,
}

impl ConvGeom {
    /// Output length is `ceil(len / stride)`; padding is split with the
    /// smaller half on the left.
    pub fn same(batch: usize, in_ch: usize, out_ch: usize, len: usize, width: usize, stride: usize) -> Self {
        let out_len = len.div_ceil(stride);
        let total = ((out_len.saturating_sub(1)) * stride + width).saturating_sub(len);
        Self {
            batch,
            in_ch,
            out_ch,
            len,
            width,
            stride,
            pad_left: total / 2,
            out_len,
        }
    }

    /// Valid output range `[lo, hi)` for tap `k` (input index `t*stride + k - pad_left`).
    #[inline]
    fn tap_range(&self, k: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if k >= self.pad_left {
            0
        } else {
            (self.pad_left - k).div_ceil(s)
        };
        // need t*s + k - pad <= len - 1
        let hi = if self.len + self.pad_left < k + 1 {
            0
        } else {
            ((self.len + self.pad_left - k - 1) / s + 1).min(self.out_len)
        };
        (lo, hi.max(lo))
    }
}

pub fn conv1d_forward<F: Scalar>(g: &ConvGeom, x: &[F], w: &[F], bias: Option<&[F]>) -> Vec<F> {
    let mut out = vec![F::zero(); g.batch * g.out_ch * g.out_len];
    out.par_chunks_mut(g.out_ch * g.out_len)
        .enumerate()
        .for_each(|(b, out_b)| {
            let x_b = &x[b * g.in_ch * g.len..(b + 1) * g.in_ch * g.len];
            for co in 0..g.out_ch {
                let row = &mut out_b[co * g.out_len..(co + 1) * g.out_len];
                if let Some(bias) = bias {
                    row.fill(bias[co]);
                }
                for ci in 0..g.in_ch {
                    let xr = &x_b[ci * g.len..(ci + 1) * g.len];
                    let wr = &w[(co * g.in_ch + ci) * g.width..(co * g.in_ch + ci + 1) * g.width];
                    for (k, &wk) in wr.iter().enumerate() {
                        let (lo, hi) = g.tap_range(k);
                        if lo >= hi {
                            continue;
                        }
                        if g.stride == 1 {
                            let src = lo + k - g.pad_left;
                            axpy(wk, &xr[src..src + hi - lo], &mut row[lo..hi]);
                        } else {
                            for t in lo..hi {
                                row[t] += wk * xr[t * g.stride + k - g.pad_left];
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Returns `(dx, dw, dbias)`; `dx` only when requested.
pub fn conv1d_backward<F: Scalar>(
    g: &ConvGeom,
    x: &[F],
    w: &[F],
    dy: &[F],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>, Vec<F>) {
    let mut db = vec![F::zero(); g.out_ch];
    for b in 0..g.batch {
        for (co, dbc) in db.iter_mut().enumerate() {
            let off = (b * g.out_ch + co) * g.out_len;
            *dbc += dy[off..off + g.out_len].iter().copied().sum::<F>();
        }
    }

    let dx = need_dx.then(|| {
        let mut dx = vec![F::zero(); g.batch * g.in_ch * g.len];
        dx.par_chunks_mut(g.in_ch * g.len)
            .enumerate()
            .for_each(|(b, dx_b)| {
                let dy_b = &dy[b * g.out_ch * g.out_len..(b + 1) * g.out_ch * g.out_len];
                for co in 0..g.out_ch {
                    let dyr = &dy_b[co * g.out_len..(co + 1) * g.out_len];
                    for ci in 0..g.in_ch {
                        let dxr = &mut dx_b[ci * g.len..(ci + 1) * g.len];
                        let wr = &w[(co * g.in_ch + ci) * g.width..(co * g.in_ch + ci + 1) * g.width];
                        for (k, &wk) in wr.iter().enumerate() {
                            let (lo, hi) = g.tap_range(k);
                            if lo >= hi {
                                continue;
                            }
                            if g.stride == 1 {
                                let dst = lo + k - g.pad_left;
                                axpy(wk, &dyr[lo..hi], &mut dxr[dst..dst + hi - lo]);
                            } else {
                                for t in lo..hi {
                                    dxr[t * g.stride + k - g.pad_left] += wk * dyr[t];
                                }
                            }
                        }
                    }
                }
            });
        dx
    });

    let dw = need_dw.then(|| {
        let mut dw = vec![F::zero(); g.out_ch * g.in_ch * g.width];
        dw.par_chunks_mut(g.in_ch * g.width)
            .enumerate()
            .for_each(|(co, dw_co)| {
                for b in 0..g.batch {
                    let dyr = &dy[(b * g.out_ch + co) * g.out_len..(b * g.out_ch + co + 1) * g.out_len];
                    for ci in 0..g.in_ch {
                        let xr = &x[(b * g.in_ch + ci) * g.len..(b * g.in_ch + ci + 1) * g.len];
                        for k in 0..g.width {
                            let (lo, hi) = g.tap_range(k);
                            if lo >= hi {
                                continue;
                            }
                            let acc = if g.stride == 1 {
                                let src = lo + k - g.pad_left;
                                dot(&dyr[lo..hi], &xr[src..src + hi - lo])
                            } else {
                                (lo..hi)
                                    .map(|t| dyr[t] * xr[t * g.stride + k - g.pad_left])
                                    .sum()
                            };
                            dw_co[ci * g.width + k] += acc;
                        }
                    }
                }
            });
        dw
    });

    (dx, dw, db)
}

/// `y[r, o] = x[r, :] . w[o, :] + b[o]`.
pub fn linear_forward<F: Scalar>(x: &[F], w: &[F], bias: Option<&[F]>, rows: usize, inp: usize, out: usize) -> Vec<F> {
    let mut y = vec![F::zero(); rows * out];
    y.par_chunks_mut(out).enumerate().for_each(|(r, yr)| {
        let xr = &x[r * inp..(r + 1) * inp];
        for (o, yo) in yr.iter_mut().enumerate() {
            *yo = dot(xr, &w[o * inp..(o + 1) * inp]) + bias.map_or(F::zero(), |b| b[o]);
        }
    });
    y
}

pub fn linear_backward_input<F: Scalar>(dy: &[F], w: &[F], rows: usize, inp: usize, out: usize) -> Vec<F> {
    let mut dx = vec![F::zero(); rows * inp];
    dx.par_chunks_mut(inp).enumerate().for_each(|(r, dxr)| {
        for o in 0..out {
            let g = dy[r * out + o];
            if g != F::zero() {
                axpy(g, &w[o * inp..(o + 1) * inp], dxr);
            }
        }
    });
    dx
}

pub fn linear_backward_weight<F: Scalar>(dy: &[F], x: &[F], rows: usize, inp: usize, out: usize) -> Vec<F> {
    let mut dw = vec![F::zero(); out * inp];
    dw.par_chunks_mut(inp).enumerate().for_each(|(o, dwo)| {
        for r in 0..rows {
            let g = dy[r * out + o];
            if g != F::zero() {
                axpy(g, &x[r * inp..(r + 1) * inp], dwo);
            }
        }
    });
    dw
}

/// Row-wise softmax of `scores` (`rows x cols`) in place, max-subtracted.
pub fn softmax_rows_in_place<F: Scalar>(scores: &mut [F], cols: usize) {
    for row in scores.chunks_exact_mut(cols) {
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut s = F::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

/// Scaled dot-product attention probabilities for every `(batch, head)`:
/// output layout `[batch, heads, seq, seq]`. Inputs are `[batch, seq, hidden]`.
pub fn attention_probs<F: Scalar>(q: &[F], k: &[F], batch: usize, seq: usize, hidden: usize, heads: usize) -> Vec<F> {
    let dh = hidden / heads;
    let scale = F::lit(1.0 / (dh as f64).sqrt());
    let mut probs = vec![F::zero(); batch * heads * seq * seq];
    probs
        .par_chunks_mut(seq * seq)
        .enumerate()
        .for_each(|(bh, p)| {
            let (b, h) = (bh / heads, bh % heads);
            for i in 0..seq {
                let qi = &q[(b * seq + i) * hidden + h * dh..(b * seq + i) * hidden + (h + 1) * dh];
                for j in 0..seq {
                    let kj = &k[(b * seq + j) * hidden + h * dh..(b * seq + j) * hidden + (h + 1) * dh];
                    p[i * seq + j] = dot(qi, kj) * scale;
                }
            }
            softmax_rows_in_place(p, seq);
        });
    probs
}

/// `out[b, i, head] = sum_j weights[b, head, i, j] * v[b, j, head]`.
pub fn attention_apply<F: Scalar>(weights: &[F], v: &[F], batch: usize, seq: usize, hidden: usize, heads: usize) -> Vec<F> {
    let dh = hidden / heads;
    let mut out = vec![F::zero(); batch * seq * hidden];
    out.par_chunks_mut(seq * hidden).enumerate().for_each(|(b, ob)| {
        for h in 0..heads {
            let p = &weights[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            for i in 0..seq {
                let oi = &mut ob[i * hidden + h * dh..i * hidden + (h + 1) * dh];
                for j in 0..seq {
                    let vj = &v[(b * seq + j) * hidden + h * dh..(b * seq + j) * hidden + (h + 1) * dh];
                    axpy(p[i * seq + j], vj, oi);
                }
            }
        }
    });
    out
}
