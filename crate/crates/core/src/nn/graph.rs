//! Tape-based reverse-mode differentiation over the operator set the
//! encoder, context model, heads and losses need.

use rand::Rng as _;

use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Scale(Var, F),
    Sum(Var),
    Relu(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    MatMulNT {
        a: Var,
        b: Var,
        m: usize,
        n: usize,
        k: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        /// Batch statistics feed the gradient only in training mode.
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    Transpose12 {
        x: Var,
        dims: [usize; 3],
    },
    Narrow {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    PrependToken {
        x: Var,
        token: Var,
        batch: usize,
        seq: usize,
        hidden: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<F>,
        mask: Option<Vec<F>>,
        dims: [usize; 4],
    },
    LogSoftmax {
        x: Var,
        cols: usize,
        excluded: Option<Vec<bool>>,
    },
    L2Normalize {
        x: Var,
        cols: usize,
        norms: Vec<F>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<F>,
    },
    Interleave {
        a: Var,
        b: Var,
        rows: usize,
        cols: usize,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

fn check_shape(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::shape(msg()))
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that is held fixed.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value.item()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_shape(va.shape() == vb.shape(), || {
            format!("add: {:?} vs {:?}", va.shape(), vb.shape())
        })?;
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Affine map over the last axis: `x[.., in] -> [.., out]` with `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        check_shape(ws.len() == 2 && !xs.is_empty() && xs[xs.len() - 1] == ws[1], || {
            format!("linear: input {xs:?} vs weight {ws:?}")
        })?;
        let (out, inp) = (ws[0], ws[1]);
        if let Some(b) = b {
            check_shape(self.shape(b) == [out], || format!("linear: bias {:?}", self.shape(b)))?;
        }
        let rows = self.value(x).len() / inp;
        let y = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            rows,
            inp,
            out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let value = Tensor::new(shape, y)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Linear { x, w, b, rows, inp, out }, &inputs))
    }

    /// `a[m, k] * b[n, k]^T -> [m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        check_shape(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1], || {
            format!("matmul_nt: {sa:?} vs {sb:?}")
        })?;
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let y = kernels::linear_forward(self.value(a).data(), self.value(b).data(), None, m, k, n);
        let value = Tensor::new(vec![m, n], y)?;
        Ok(self.push(value, Op::MatMulNT { a, b, m, n, k }, &[a, b]))
    }

    /// Convolution over `[batch, channels, time]` with "same" padding.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        check_shape(xs.len() == 3 && ws.len() == 3 && xs[1] == ws[1], || {
            format!("conv1d: input {xs:?} vs kernel {ws:?}")
        })?;
        check_shape(stride >= 1 && xs[2] >= 1, || "conv1d: empty input".into())?;
        let geom = ConvGeom::same(xs[0], xs[1], ws[0], xs[2], ws[2], stride);
        let y = kernels::conv1d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![geom.batch, geom.out_ch, geom.out_len], y)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Conv1d { x, w, b, geom }, &inputs))
    }

    /// Per-channel normalization of `[batch, channels, time]`.
    ///
    /// With `running = None` the statistics come from the batch (over batch
    /// and time) and the returned pair holds the batch mean and unbiased
    /// variance. Otherwise the given `(mean, var)` are used as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[F], &[F])>,
    ) -> Result<(Var, Option<(Vec<F>, Vec<F>)>)> {
        let xs = self.shape(x).to_vec();
        check_shape(xs.len() == 3, || format!("batch_norm: input {xs:?}"))?;
        let (bsz, ch, len) = (xs[0], xs[1], xs[2]);
        check_shape(self.shape(gamma) == [ch] && self.shape(beta) == [ch], || {
            "batch_norm: affine parameter shape".into()
        })?;
        let n = bsz * len;
        let xd = self.value(x).data();
        let mut mean = vec![F::zero(); ch];
        let mut var = vec![F::zero(); ch];
        let stats = match running {
            Some((m, v)) => {
                mean.copy_from_slice(m);
                var.copy_from_slice(v);
                None
            }
            None => {
                for c in 0..ch {
                    let mut s = F::zero();
                    for b in 0..bsz {
                        s += xd[(b * ch + c) * len..(b * ch + c + 1) * len].iter().copied().sum::<F>();
                    }
                    mean[c] = s / F::lit(n as f64);
                    let mut ss = F::zero();
                    for b in 0..bsz {
                        for &v in &xd[(b * ch + c) * len..(b * ch + c + 1) * len] {
                            ss += (v - mean[c]) * (v - mean[c]);
                        }
                    }
                    var[c] = ss / F::lit(n as f64);
                }
                let unbiased = var
                    .iter()
                    .map(|&v| if n > 1 { v * F::lit(n as f64 / (n - 1) as f64) } else { v })
                    .collect();
                Some((mean.clone(), unbiased))
            }
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + F::lit(eps)).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![F::zero(); xd.len()];
        let mut y = vec![F::zero(); xd.len()];
        for b in 0..bsz {
            for c in 0..ch {
                let off = (b * ch + c) * len;
                for t in 0..len {
                    let h = (xd[off + t] - mean[c]) * inv_std[c];
                    xhat[off + t] = h;
                    y[off + t] = g[c] * h + be[c];
                }
            }
        }
        let value = Tensor::new(xs, y)?;
        let batch_stats = stats.is_some();
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    /// Non-overlapping max pooling along time; trailing remainder dropped.
    pub fn max_pool1d(&mut self, x: Var, pool: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        check_shape(xs.len() == 3 && pool >= 1, || format!("max_pool1d: input {xs:?}"))?;
        let (rows, len) = (xs[0] * xs[1], xs[2]);
        let out_len = len / pool;
        check_shape(out_len >= 1, || {
            format!("max_pool1d: length {len} too short for pool {pool}")
        })?;
        let xd = self.value(x).data();
        let mut y = Vec::with_capacity(rows * out_len);
        let mut argmax = Vec::with_capacity(rows * out_len);
        for r in 0..rows {
            for j in 0..out_len {
                let base = r * len + j * pool;
                let mut best = base;
                for i in base + 1..base + pool {
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                y.push(xd[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::new(vec![xs[0], xs[1], out_len], y)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Inverted dropout. A no-op when `p == 0` or no rng is supplied.
    pub fn dropout(&mut self, x: Var, p: f64, rng: Option<&mut Rng>) -> Var {
        let rng = match rng {
            Some(r) if p > 0.0 => r,
            _ => return x,
        };
        let keep = F::lit(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<F> = (0..n)
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let xd = self.value(x);
        let data = xd.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(xd.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    /// `[a, b, c] -> [a, c, b]`.
    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        check_shape(xs.len() == 3, || format!("transpose12: input {xs:?}"))?;
        let (a, b, c) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let mut y = vec![F::zero(); xd.len()];
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    y[(i * c + k) * b + j] = xd[(i * b + j) * c + k];
                }
            }
        }
        let value = Tensor::new(vec![a, c, b], y)?;
        Ok(self.push(value, Op::Transpose12 { x, dims: [a, b, c] }, &[x]))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        check_shape(axis < xs.len() && start + len <= xs[axis] && len >= 1, || {
            format!("narrow: axis {axis} [{start}, {}) of {xs:?}", start + len)
        })?;
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let axis_len = xs[axis];
        let xd = self.value(x).data();
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            y.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let value = Tensor::new(shape, y)?;
        Ok(self.push(
            value,
            Op::Narrow {
                x,
                outer,
                axis_len,
                inner,
                start,
                len,
            },
            &[x],
        ))
    }

    /// `[batch, seq, h]` with token `[h]` -> `[batch, seq + 1, h]`, token first.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        check_shape(xs.len() == 3 && self.shape(token) == [xs[2]], || {
            format!("prepend_token: input {xs:?} token {:?}", self.shape(token))
        })?;
        let (batch, seq, hidden) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let td = self.value(token).data();
        let mut y = Vec::with_capacity(batch * (seq + 1) * hidden);
        for b in 0..batch {
            y.extend_from_slice(td);
            y.extend_from_slice(&xd[b * seq * hidden..(b + 1) * seq * hidden]);
        }
        let value = Tensor::new(vec![batch, seq + 1, hidden], y)?;
        Ok(self.push(
            value,
            Op::PrependToken {
                x,
                token,
                batch,
                seq,
                hidden,
            },
            &[x, token],
        ))
    }

    /// Normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let h = *xs.last().ok_or_else(|| Error::shape("layer_norm: scalar input"))?;
        check_shape(self.shape(gamma) == [h] && self.shape(beta) == [h], || {
            "layer_norm: affine parameter shape".into()
        })?;
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let rows = xd.len() / h;
        let mut xhat = vec![F::zero(); xd.len()];
        let mut y = vec![F::zero(); xd.len()];
        let mut inv_std = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &xd[r * h..(r + 1) * h];
            let mean = row.iter().copied().sum::<F>() / F::lit(h as f64);
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / F::lit(h as f64);
            let is = F::one() / (var + F::lit(eps)).sqrt();
            inv_std[r] = is;
            for i in 0..h {
                let xh = (row[i] - mean) * is;
                xhat[r * h + i] = xh;
                y[r * h + i] = g[i] * xh + be[i];
            }
        }
        let value = Tensor::new(xs, y)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Multi-head scaled dot-product attention over `[batch, seq, hidden]`
    /// projections, with optional dropout on the attention weights.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, dropout: f64, rng: Option<&mut Rng>) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        check_shape(qs.len() == 3 && self.shape(k) == qs.as_slice() && self.shape(v) == qs.as_slice(), || {
            format!("attention: q {qs:?} k {:?} v {:?}", self.shape(k), self.shape(v))
        })?;
        let (batch, seq, hidden) = (qs[0], qs[1], qs[2]);
        check_shape(heads >= 1 && hidden % heads == 0, || {
            format!("attention: hidden {hidden} not divisible by {heads} heads")
        })?;
        let probs = kernels::attention_probs(self.value(q).data(), self.value(k).data(), batch, seq, hidden, heads);
        let mask = match rng {
            Some(rng) if dropout > 0.0 => {
                let keep = F::lit(1.0 / (1.0 - dropout));
                Some(
                    (0..probs.len())
                        .map(|_| if rng.random::<f64>() < dropout { F::zero() } else { keep })
                        .collect::<Vec<F>>(),
                )
            }
            _ => None,
        };
        let y = match &mask {
            Some(m) => {
                let dropped: Vec<F> = probs.iter().zip(m).map(|(&p, &m)| p * m).collect();
                kernels::attention_apply(&dropped, self.value(v).data(), batch, seq, hidden, heads)
            }
            None => kernels::attention_apply(&probs, self.value(v).data(), batch, seq, hidden, heads),
        };
        let value = Tensor::new(qs, y)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                probs,
                mask,
                dims: [batch, seq, hidden, heads],
            },
            &[q, k, v],
        ))
    }

    /// Row-wise log-softmax of a matrix. Entries flagged in `excluded` are
    /// left out of the normalizer and produce zero.
    pub fn log_softmax_rows(&mut self, x: Var, excluded: Option<Vec<bool>>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        check_shape(xs.len() == 2, || format!("log_softmax_rows: input {xs:?}"))?;
        let cols = xs[1];
        if let Some(ex) = &excluded {
            check_shape(ex.len() == xs[0] * cols, || "log_softmax_rows: mask size".into())?;
        }
        let xd = self.value(x).data();
        let mut y = vec![F::zero(); xd.len()];
        for r in 0..xs[0] {
            let keep = |j: usize| excluded.as_ref().is_none_or(|e| !e[r * cols + j]);
            let row = &xd[r * cols..(r + 1) * cols];
            let m = (0..cols).filter(|&j| keep(j)).map(|j| row[j]).fold(F::neg_infinity(), F::max);
            if m == F::neg_infinity() {
                continue;
            }
            let s: F = (0..cols).filter(|&j| keep(j)).map(|j| (row[j] - m).exp()).sum();
            let lse = m + s.ln();
            for j in (0..cols).filter(|&j| keep(j)) {
                y[r * cols + j] = row[j] - lse;
            }
        }
        let value = Tensor::new(xs, y)?;
        Ok(self.push(value, Op::LogSoftmax { x, cols, excluded }, &[x]))
    }

    /// Scale each row to unit L2 norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        check_shape(xs.len() == 2, || format!("l2_normalize_rows: input {xs:?}"))?;
        let cols = xs[1];
        let xd = self.value(x).data();
        let mut norms = Vec::with_capacity(xs[0]);
        let mut y = vec![F::zero(); xd.len()];
        for r in 0..xs[0] {
            let row = &xd[r * cols..(r + 1) * cols];
            let n = kernels::dot(row, row).sqrt();
            norms.push(n);
            if n > F::zero() {
                for j in 0..cols {
                    y[r * cols + j] = row[j] / n;
                }
            }
        }
        let value = Tensor::new(xs, y)?;
        Ok(self.push(value, Op::L2Normalize { x, cols, norms }, &[x]))
    }

    /// `sum_i weights[i] * x[i]` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<F>) -> Result<Var> {
        check_shape(weights.len() == self.value(x).len(), || "weighted_sum: weight count".into())?;
        let s = kernels::dot(self.value(x).data(), &weights);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, &[x]))
    }

    /// Rows `a[i]`, `b[i]` placed at `2i`, `2i + 1`.
    pub fn interleave_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        check_shape(sa.len() == 2 && sa == sb, || format!("interleave_rows: {sa:?} vs {sb:?}"))?;
        let (rows, cols) = (sa[0], sa[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut y = Vec::with_capacity(2 * rows * cols);
        for i in 0..rows {
            y.extend_from_slice(&ad[i * cols..(i + 1) * cols]);
            y.extend_from_slice(&bd[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![2 * rows, cols], y)?;
        Ok(self.push(value, Op::Interleave { a, b, rows, cols }, &[a, b]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backward_node(node, &dy, &mut grads);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, data: Vec<F>) {
        if !self.wants(v) {
            return;
        }
        let shape = self.value(v).shape().to_vec();
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(data) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(Tensor::new(shape, data).expect("gradient shape")),
        }
    }

    fn backward_node(&self, node: &Node<F>, dy: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let g = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.iter().map(|&v| v * *s).collect()),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let d = xd
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > F::zero() { gv } else { F::zero() })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Linear { x, w, b, rows, inp, out } => {
                if self.wants(*x) {
                    let dx = kernels::linear_backward_input(g, self.value(*w).data(), *rows, *inp, *out);
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let dw = kernels::linear_backward_weight(g, self.value(*x).data(), *rows, *inp, *out);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![F::zero(); *out];
                        for r in 0..*rows {
                            for o in 0..*out {
                                db[o] += g[r * out + o];
                            }
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::MatMulNT { a, b, m, n, k } => {
                if self.wants(*a) {
                    let da = kernels::linear_backward_input(g, self.value(*b).data(), *m, *k, *n);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let db = kernels::linear_backward_weight(g, self.value(*a).data(), *m, *k, *n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv1d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv1d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = self.value(*x).shape();
                let (bsz, ch, len) = (s[0], s[1], s[2]);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![F::zero(); ch];
                let mut dbeta = vec![F::zero(); ch];
                for b in 0..bsz {
                    for c in 0..ch {
                        let off = (b * ch + c) * len;
                        for t in 0..len {
                            dgamma[c] += g[off + t] * xhat[off + t];
                            dbeta[c] += g[off + t];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![F::zero(); g.len()];
                    let n = F::lit((bsz * len) as f64);
                    for c in 0..ch {
                        let k = gam[c] * inv_std[c];
                        for b in 0..bsz {
                            let off = (b * ch + c) * len;
                            for t in 0..len {
                                dx[off + t] = if *batch_stats {
                                    k * (g[off + t] - dbeta[c] / n - xhat[off + t] * dgamma[c] / n)
                                } else {
                                    k * g[off + t]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![F::zero(); self.value(*x).len()];
                for (&i, &gv) in argmax.iter().zip(g) {
                    dx[i] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect());
            }
            Op::Transpose12 { x, dims } => {
                let [a, b, c] = *dims;
                let mut dx = vec![F::zero(); g.len()];
                for i in 0..a {
                    for j in 0..b {
                        for k in 0..c {
                            dx[(i * b + j) * c + k] = g[(i * c + k) * b + j];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Narrow {
                x,
                outer,
                axis_len,
                inner,
                start,
                len,
            } => {
                let mut dx = vec![F::zero(); outer * axis_len * inner];
                for o in 0..*outer {
                    let dst = (o * axis_len + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::PrependToken {
                x,
                token,
                batch,
                seq,
                hidden,
            } => {
                let (bsz, s, h) = (*batch, *seq, *hidden);
                if self.wants(*token) {
                    let mut dt = vec![F::zero(); h];
                    for b in 0..bsz {
                        kernels::axpy(F::one(), &g[b * (s + 1) * h..b * (s + 1) * h + h], &mut dt);
                    }
                    self.accumulate(grads, *token, dt);
                }
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(bsz * s * h);
                    for b in 0..bsz {
                        dx.extend_from_slice(&g[(b * (s + 1) + 1) * h..(b + 1) * (s + 1) * h]);
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let h = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                let rows = g.len() / h;
                let mut dgamma = vec![F::zero(); h];
                let mut dbeta = vec![F::zero(); h];
                let mut dx = vec![F::zero(); g.len()];
                let hf = F::lit(h as f64);
                for r in 0..rows {
                    let gr = &g[r * h..(r + 1) * h];
                    let xr = &xhat[r * h..(r + 1) * h];
                    let mut sum_d = F::zero();
                    let mut sum_dx = F::zero();
                    for i in 0..h {
                        dgamma[i] += gr[i] * xr[i];
                        dbeta[i] += gr[i];
                        let d = gr[i] * gam[i];
                        sum_d += d;
                        sum_dx += d * xr[i];
                    }
                    for i in 0..h {
                        let d = gr[i] * gam[i];
                        dx[r * h + i] = inv_std[r] * (d - sum_d / hf - xr[i] * sum_dx / hf);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                mask,
                dims,
            } => {
                let [batch, seq, hidden, heads] = *dims;
                let dh = hidden / heads;
                let scale = F::lit(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![F::zero(); qd.len()];
                let mut dk = vec![F::zero(); kd.len()];
                let mut dv = vec![F::zero(); vd.len()];
                let at = |b: usize, i: usize, h: usize| (b * seq + i) * hidden + h * dh;
                let mut dp = vec![F::zero(); seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let pbase = (b * heads + h) * seq * seq;
                        let p = &probs[pbase..pbase + seq * seq];
                        let m = mask.as_ref().map(|m| &m[pbase..pbase + seq * seq]);
                        for i in 0..seq {
                            let gi = &g[at(b, i, h)..at(b, i, h) + dh];
                            for j in 0..seq {
                                let mij = m.map_or(F::one(), |m| m[i * seq + j]);
                                let vj = &vd[at(b, j, h)..at(b, j, h) + dh];
                                dp[i * seq + j] = kernels::dot(gi, vj) * mij;
                                kernels::axpy(p[i * seq + j] * mij, gi, &mut dv[at(b, j, h)..at(b, j, h) + dh]);
                            }
                        }
                        for i in 0..seq {
                            let row_p = &p[i * seq..(i + 1) * seq];
                            let row_dp = &dp[i * seq..(i + 1) * seq];
                            let inner = kernels::dot(row_p, row_dp);
                            for j in 0..seq {
                                let ds = row_p[j] * (row_dp[j] - inner) * scale;
                                if ds == F::zero() {
                                    continue;
                                }
                                let (qi, kj) = (at(b, i, h), at(b, j, h));
                                kernels::axpy(ds, &kd[kj..kj + dh], &mut dq[qi..qi + dh]);
                                kernels::axpy(ds, &qd[qi..qi + dh], &mut dk[kj..kj + dh]);
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::LogSoftmax { x, cols, excluded } => {
                let y = node.value.data();
                let mut dx = vec![F::zero(); g.len()];
                let rows = g.len() / cols;
                for r in 0..rows {
                    let keep = |j: usize| excluded.as_ref().is_none_or(|e| !e[r * cols + j]);
                    let total: F = (0..*cols).filter(|&j| keep(j)).map(|j| g[r * cols + j]).sum();
                    for j in (0..*cols).filter(|&j| keep(j)) {
                        dx[r * cols + j] = g[r * cols + j] - y[r * cols + j].exp() * total;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::L2Normalize { x, cols, norms } => {
                let y = node.value.data();
                let mut dx = vec![F::zero(); g.len()];
                for (r, &n) in norms.iter().enumerate() {
                    if n <= F::zero() {
                        continue;
                    }
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let proj = kernels::dot(yr, gr);
                    for j in 0..*cols {
                        dx[r * cols + j] = (gr[j] - yr[j] * proj) / n;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::WeightedSum { x, weights } => {
                self.accumulate(grads, *x, weights.iter().map(|&w| w * g[0]).collect());
            }
            Op::Interleave { a, b, rows, cols } => {
                let (r, c) = (*rows, *cols);
                if self.wants(*a) {
                    let da = (0..r).flat_map(|i| g[2 * i * c..(2 * i + 1) * c].iter().copied()).collect();
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let db = (0..r)
                        .flat_map(|i| g[(2 * i + 1) * c..(2 * i + 2) * c].iter().copied())
                        .collect();
                    self.accumulate(grads, *b, db);
                }
            }
        }
    }
}
