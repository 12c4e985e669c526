// SPDX-License-Identifier: MIT OR Apache-2.0

//! Wengert tape: every primitive appends one node holding its forward value,
//! and `backward` replays the nodes in reverse to accumulate vector-Jacobian
//! products. Nodes are appended in evaluation order, so index order is a
//! topological order of the graph.
//!
//! Broadcasting is limited to [`Tape::add_bias`] (a length-`n` vector added
//! to every row of an `[.., n]` tensor). Every other binary op requires
//! identical shapes.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias { x: Var, bias: Var },
    Embedding { table: Var, ids: Vec<usize> },
    LayerNorm {
        x: Var,
        gain: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        bias: Var,
    },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Gelu(Var),
    Exp(Var),
    CausalMask(Var),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    AddRowsAt { x: Var, rows: Var, start: usize },
    ReplaceRowsAt { x: Var, rows: Var, start: usize },
    Sum(Var),
    Nll { logprobs: Var, targets: Vec<usize> },
    Kl { q_logits: Var, p: Vec<f64>, q: Vec<f64>, rows: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if any flowed into it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Record of primitive operations for one differentiation pass.
///
/// A tape is confined to a single thread; independent tapes can run in
/// parallel.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `c = a · b (+ beta · c)` where `a` is `[m, k]` and `b` is `[k, n]`
/// logically; either operand may be stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements (asserted
    // above) and the strides address them in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (value, deriv)
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn log_softmax_row(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(logits) {
        *o = v - lse;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|_| Error::shape(op, format!("expected rank 2, got {:?}", self.shape(v))))
    }

    /// `a · b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (br, bc) = self.dims2("matmul", b)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{:?} x {:?}{}",
                    self.shape(a),
                    self.shape(b),
                    if trans_b { "ᵀ" } else { "" }
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b },
            rg,
        ))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Adds a length-`n` vector to every row of `x: [.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let mut t = self.value(x).clone();
        if n > 0 {
            for row in t.data_mut().chunks_mut(n) {
                row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddBias { x, bias }, rg))
    }

    /// Gathers rows of `table: [vocab, h]` into `[ids.len(), h]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, h) = self.dims2("embedding_lookup", table)?;
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: vocab,
                });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), h], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Normalizes the last axis, then applies `gain` and `bias` of length `n`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::InvalidConfig(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let n = *self.shape(x).last().unwrap_or(&0);
        if n == 0 || self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.numel() / n;
        let mut normalized = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..n {
                let xh = (row[j] - mean) * istd;
                normalized[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                normalized,
                inv_std,
                bias,
            },
            rg,
        ))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::shape(
                op,
                format!("axis {axis} out of range for {:?}", self.shape(x)),
            ));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let xv = self.value(x);
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let mut out = vec![0.0; xv.numel()];
        let src = xv.data();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let xv = self.value(x);
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let mut out = vec![0.0; xv.numel()];
        let src = xv.data();
        let mut line = vec![0.0; len];
        let mut res = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * len * inner + j * inner + i;
                for (j, l) in line.iter_mut().enumerate() {
                    *l = src[idx(j)];
                }
                log_softmax_row(&line, &mut res);
                for (j, r) in res.iter().enumerate() {
                    out[idx(j)] = *r;
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::LogSoftmax { x, axis }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| gelu_parts(v).0);
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(t, Op::Exp(x), rg)
    }

    /// Sets entries above the diagonal of `x: [m, n]` to `-inf`.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("causal_mask", x)?;
        let mut t = self.value(x).clone();
        let d = t.data_mut();
        for i in 0..m {
            for j in (i + 1)..n {
                d[i * n + j] = f64::NEG_INFINITY;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(t, Op::CausalMask(x), rg))
    }

    /// Columns `[start, end)` of `x: [m, n]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_cols", x)?;
        if start > end || end > n {
            return Err(Error::SpanOutOfRange { start, end, len: n });
        }
        let src = self.value(x).data();
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![m, w], out)?, Op::SliceCols { x, start }, rg))
    }

    /// Rows `[start, end)` of `x: [m, n]`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x).slice_rows(start, end)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("concat_cols operands"));
        };
        let (m, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2("concat_cols", p)?;
            if pm != m {
                return Err(Error::shape("concat_cols", format!("row counts {m} vs {pm}")));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    fn check_rows_at(&self, op: &'static str, x: Var, rows: Var, start: usize) -> Result<(usize, usize)> {
        let (m, n) = self.dims2(op, x)?;
        let (r, rn) = self.dims2(op, rows)?;
        if rn != n {
            return Err(Error::shape(
                op,
                format!("row width {rn} vs {n}"),
            ));
        }
        if start + r > m {
            return Err(Error::SpanOutOfRange {
                start,
                end: start + r,
                len: m,
            });
        }
        Ok((r, n))
    }

    /// `x` with `rows` added over rows `[start, start + rows.len())`.
    pub fn add_rows_at(&mut self, x: Var, rows: Var, start: usize) -> Result<Var> {
        let (r, n) = self.check_rows_at("add_rows_at", x, rows, start)?;
        let mut t = self.value(x).clone();
        let src = self.value(rows).data();
        for (v, d) in t.data_mut()[start * n..(start + r) * n].iter_mut().zip(src) {
            *v += d;
        }
        let rg = self.rg(x) || self.rg(rows);
        Ok(self.push(t, Op::AddRowsAt { x, rows, start }, rg))
    }

    /// `x` with rows `[start, start + rows.len())` replaced by `rows`.
    pub fn replace_rows_at(&mut self, x: Var, rows: Var, start: usize) -> Result<Var> {
        let (r, n) = self.check_rows_at("replace_rows_at", x, rows, start)?;
        let mut t = self.value(x).clone();
        t.data_mut()[start * n..(start + r) * n].copy_from_slice(self.value(rows).data());
        let rg = self.rg(x) || self.rg(rows);
        Ok(self.push(t, Op::ReplaceRowsAt { x, rows, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean negative log-probability of `targets[i]` under row `i` of
    /// `logprobs: [rows, vocab]`. Requires `rows >= targets.len()`.
    pub fn nll_loss(&mut self, logprobs: Var, targets: &[usize]) -> Result<Var> {
        let (rows, vocab) = self.dims2("nll_loss", logprobs)?;
        if targets.is_empty() {
            return Err(Error::Empty("nll_loss targets"));
        }
        if rows < targets.len() {
            return Err(Error::shape(
                "nll_loss",
                format!("{rows} rows for {} targets", targets.len()),
            ));
        }
        let lp = self.value(logprobs);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(Error::TokenOutOfRange {
                    id: t,
                    vocab_size: vocab,
                });
            }
            total -= lp.data()[i * vocab + t];
        }
        let value = total / targets.len() as f64;
        let rg = self.rg(logprobs);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Nll {
                logprobs,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `KL(softmax(p) ‖ softmax(q))`. `p` is treated as a
    /// fixed reference: no gradient flows into it.
    pub fn kl_divergence(&mut self, p_logits: Var, q_logits: Var) -> Result<Var> {
        self.same_shape("kl_divergence", p_logits, q_logits)?;
        let n = *self.shape(q_logits).last().unwrap_or(&0);
        if n == 0 {
            return Err(Error::Empty("kl_divergence logits"));
        }
        let (pv, qv) = (self.value(p_logits).data(), self.value(q_logits).data());
        let rows = pv.len() / n;
        let mut logp = vec![0.0; n];
        let mut logq = vec![0.0; n];
        let mut p = vec![0.0; pv.len()];
        let mut q = vec![0.0; qv.len()];
        let mut total = 0.0;
        for r in 0..rows {
            log_softmax_row(&pv[r * n..(r + 1) * n], &mut logp);
            log_softmax_row(&qv[r * n..(r + 1) * n], &mut logq);
            for j in 0..n {
                let pj = logp[j].exp();
                p[r * n + j] = pj;
                q[r * n + j] = logq[j].exp();
                if pj > 0.0 {
                    total += pj * (logp[j] - logq[j]);
                }
            }
        }
        let value = total / rows as f64;
        let rg = self.rg(q_logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Kl {
                q_logits,
                p,
                q,
                rows,
            },
            rg,
        ))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|d| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), d)
                        .expect("gradient shape mirrors value shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Zero-initialized gradient buffer for `v`, or `None` when `v` needs none.
    fn buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let numel = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; numel]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.value(*a).dims2().expect("rank 2");
                let n = node.value.shape()[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.buf(grads, *a) {
                    // dA = dC · Bᵀ (logical B).
                    gemm(m, n, k, g, false, bv, !*trans_b, ga, 1.0);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    if *trans_b {
                        // stored S = Bᵀ: dS = dCᵀ · A.
                        gemm(n, m, k, g, true, av, false, gb, 1.0);
                    } else {
                        gemm(k, m, n, av, true, g, false, gb, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.buf(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.buf(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.buf(grads, *a) {
                    for ((x, d), y) in ga.iter_mut().zip(g).zip(bv) {
                        *x += d * y;
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for ((x, d), y) in gb.iter_mut().zip(g).zip(av) {
                        *x += d * y;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.buf(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += s * d);
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(gx) = self.buf(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(v, d)| *v += d);
                }
                let n = self.value(*bias).numel();
                if let Some(gb) = self.buf(grads, *bias) {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(v, d)| *v += d);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let h = self.value(*table).shape()[1];
                if let Some(gt) = self.buf(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * h..(id + 1) * h];
                        dst.iter_mut().zip(&g[r * h..(r + 1) * h]).for_each(|(v, d)| *v += d);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                normalized,
                inv_std,
                bias,
            } => {
                let gv = self.value(*gain).data();
                let n = gv.len();
                if let Some(gg) = self.buf(grads, *gain) {
                    for (row_g, row_xh) in g.chunks(n).zip(normalized.chunks(n)) {
                        for j in 0..n {
                            gg[j] += row_g[j] * row_xh[j];
                        }
                    }
                }
                if let Some(gb) = self.buf(grads, *bias) {
                    for row_g in g.chunks(n) {
                        gb.iter_mut().zip(row_g).for_each(|(v, d)| *v += d);
                    }
                }
                if let Some(gx) = self.buf(grads, *x) {
                    let mut dxh = vec![0.0; n];
                    for (r, istd) in inv_std.iter().enumerate() {
                        let row_g = &g[r * n..(r + 1) * n];
                        let row_xh = &normalized[r * n..(r + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            dxh[j] = row_g[j] * gv[j];
                            mean_d += dxh[j];
                            mean_dx += dxh[j] * row_xh[j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        let dst = &mut gx[r * n..(r + 1) * n];
                        for j in 0..n {
                            dst[j] += istd * (dxh[j] - mean_d - row_xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                if let Some(gx) = self.buf(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * val[idx(j)]).sum();
                            for j in 0..len {
                                gx[idx(j)] += val[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                if let Some(gx) = self.buf(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| o * len * inner + j * inner + i;
                            let total: f64 = (0..len).map(|j| g[idx(j)]).sum();
                            for j in 0..len {
                                gx[idx(j)] += g[idx(j)] - val[idx(j)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.buf(grads, *x) {
                    for ((v, d), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *v += d * gelu_parts(xi).1;
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = self.buf(grads, *x) {
                    for ((v, d), y) in gx.iter_mut().zip(g).zip(val) {
                        *v += d * y;
                    }
                }
            }
            Op::CausalMask(x) => {
                let n = node.value.shape()[1];
                if let Some(gx) = self.buf(grads, *x) {
                    for (idx, (v, d)) in gx.iter_mut().zip(g).enumerate() {
                        if idx % n <= idx / n {
                            *v += d;
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (m, w) = node.value.dims2().expect("rank 2");
                let n = self.value(*x).shape()[1];
                if let Some(gx) = self.buf(grads, *x) {
                    for r in 0..m {
                        let dst = &mut gx[r * n + start..r * n + start + w];
                        dst.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(v, d)| *v += d);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let n = node.value.shape()[1];
                if let Some(gx) = self.buf(grads, *x) {
                    let dst = &mut gx[start * n..start * n + g.len()];
                    dst.iter_mut().zip(g).for_each(|(v, d)| *v += d);
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = node.value.dims2().expect("rank 2");
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if let Some(gp) = self.buf(grads, p) {
                        for r in 0..m {
                            let src = &g[r * n + offset..r * n + offset + w];
                            gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(v, d)| *v += d);
                        }
                    }
                    offset += w;
                }
            }
            Op::AddRowsAt { x, rows, start } => {
                let n = node.value.shape()[1];
                if let Some(gx) = self.buf(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(v, d)| *v += d);
                }
                let r = self.value(*rows).shape()[0];
                if let Some(gr) = self.buf(grads, *rows) {
                    let src = &g[start * n..(start + r) * n];
                    gr.iter_mut().zip(src).for_each(|(v, d)| *v += d);
                }
            }
            Op::ReplaceRowsAt { x, rows, start } => {
                let n = node.value.shape()[1];
                let r = self.value(*rows).shape()[0];
                let (lo, hi) = (start * n, (start + r) * n);
                if let Some(gx) = self.buf(grads, *x) {
                    for (idx, (v, d)) in gx.iter_mut().zip(g).enumerate() {
                        if idx < lo || idx >= hi {
                            *v += d;
                        }
                    }
                }
                if let Some(gr) = self.buf(grads, *rows) {
                    gr.iter_mut().zip(&g[lo..hi]).for_each(|(v, d)| *v += d);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.buf(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Nll { logprobs, targets } => {
                let vocab = self.value(*logprobs).shape()[1];
                let w = -g[0] / targets.len() as f64;
                if let Some(gl) = self.buf(grads, *logprobs) {
                    for (i, &t) in targets.iter().enumerate() {
                        gl[i * vocab + t] += w;
                    }
                }
            }
            Op::Kl {
                q_logits,
                p,
                q,
                rows,
            } => {
                let w = g[0] / *rows as f64;
                if let Some(gq) = self.buf(grads, *q_logits) {
                    for ((v, pj), qj) in gq.iter_mut().zip(p).zip(q) {
                        *v += w * (qj - pj);
                    }
                }
            }
        }
    }
}
